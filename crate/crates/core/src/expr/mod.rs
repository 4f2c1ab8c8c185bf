//! Spot-expression ingestion and preprocessing.

pub mod hvg;
pub mod io;
pub mod lattice;
pub mod normalize;
pub mod panel;
pub mod split;
pub mod table;

pub use hvg::{hvg_stats, select_hvg, HvgStats};
pub use io::{load_dataset, load_sample, read_mapping, write_sample, SampleMeta};
pub use lattice::{build_hex_adjacency, smooth_local, HexLattice};
pub use normalize::{count_normalize, drop_empty_spots, log1p_transform, DEFAULT_TARGET_SUM};
pub use panel::{filter_genes_by_prevalence, harmonize_panels, rename_genes, supplement_panel, GenePanel, Harmonized, Provenance};
pub use split::{split_by_patient, Split, SplitManifest};
pub use table::{SpotCoord, SpotTable, Stage};

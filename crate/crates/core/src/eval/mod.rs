//! Linear probing, metrics, bag pooling and cross-modal retrieval.

pub mod linear;
pub mod metrics;
pub mod mil;
pub mod probe;
pub mod retrieval;

pub use linear::{pca_fit, pca_transform, ridge_fit, ridge_predict, Pca, Ridge};
pub use metrics::{average_ranks, mean_sd, metric_auc, metric_mse, metric_pcc, metric_spearman, Corr};
pub use mil::{abmil_pool, mean_pool, AttentionPool};
pub use probe::{fold_assignments, kfold_probe, GeneSummary, ProbeConfig, ProbeResult};
pub use retrieval::{
    cosine_scores, g2i_build_query, g2i_similarity_map, i2g_retrieve, percentile, write_similarity_png, write_similarity_tsv,
    MolecularQuery, WeightMode,
};

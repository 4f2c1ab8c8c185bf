//! Preprocessing pipeline and the processed dataset layout.
//!
//! A processed root holds `panel.tsv`, `split.tsv`, `samples.tsv`,
//! `preprocess.json` and one directory per sample with `spots.tsv`,
//! `expr.bin` (smoothed expression, panel column order) and, when the raw
//! sample had one, `images.bin` with rows aligned to the kept spots.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::blob::{write_atomic, EmbeddingBlob};
use crate::error::{Result, SealError};
use crate::expr::io::{read_gene_list, read_sample_index, sample_dir, write_sample_index};
use crate::expr::{
    build_hex_adjacency, count_normalize, drop_empty_spots, filter_genes_by_prevalence, harmonize_panels, load_dataset,
    log1p_transform, read_mapping, rename_genes, select_hvg, smooth_local, split_by_patient, supplement_panel, GenePanel,
    SampleMeta, Split, SplitManifest, SpotCoord, SpotTable, Stage, DEFAULT_TARGET_SUM,
};
use crate::synth::IMAGE_FILE;
use seal_autodiff::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub min_overlap: usize,
    pub min_prevalence: f64,
    pub target_sum: f64,
    pub n_hvg: usize,
    pub hvg_bins: usize,
    pub split_ratios: (f64, f64, f64),
    pub seed: u64,
    pub mapping_file: Option<String>,
    pub supplement_file: Option<String>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_overlap: 1,
            min_prevalence: 0.1,
            target_sum: DEFAULT_TARGET_SUM,
            n_hvg: 2000,
            hvg_bins: 20,
            split_ratios: (0.8, 0.1, 0.1),
            seed: 0,
            mapping_file: None,
            supplement_file: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProcessedSample {
    pub table: SpotTable,
    pub images: Option<Mat>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub panel: GenePanel,
    pub split: SplitManifest,
    pub samples: Vec<ProcessedSample>,
}

impl Dataset {
    pub fn split_of(&self, s: &ProcessedSample) -> Split {
        self.split.split_of(&s.table.patient_id).unwrap_or(Split::Train)
    }

    pub fn in_split(&self, split: Split) -> Vec<&ProcessedSample> {
        self.samples.iter().filter(|s| self.split_of(s) == split).collect()
    }

    pub fn n_domains(&self) -> usize {
        self.samples.iter().map(|s| s.table.domain_id + 1).max().unwrap_or(1)
    }
}

/// Pooled rows of several samples.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub expr: Mat,
    pub images: Option<Mat>,
    pub domains: Vec<usize>,
    /// `(sample index, spot index)` of each pooled row.
    pub origin: Vec<(usize, usize)>,
}

pub fn pool(samples: &[&ProcessedSample]) -> Result<Pooled> {
    if samples.is_empty() {
        return Err(SealError::Empty("no samples to pool".into()));
    }
    let exprs: Vec<_> = samples.iter().map(|s| s.table.values.view()).collect();
    let expr = concatenate(Axis(0), &exprs).map_err(|e| SealError::DimensionMismatch(format!("pooling expression: {e}")))?;
    let images = if samples.iter().all(|s| s.images.is_some()) {
        let views: Vec<_> = samples.iter().map(|s| s.images.as_ref().expect("checked").view()).collect();
        Some(concatenate(Axis(0), &views).map_err(|e| SealError::DimensionMismatch(format!("pooling images: {e}")))?)
    } else {
        None
    };
    let mut domains = Vec::new();
    let mut origin = Vec::new();
    for (k, s) in samples.iter().enumerate() {
        for i in 0..s.table.n_spots() {
            domains.push(s.table.domain_id);
            origin.push((k, i));
        }
    }
    Ok(Pooled {
        expr,
        images,
        domains,
        origin,
    })
}

fn realign_images(raw: &SpotTable, kept: &SpotTable, images: &Mat) -> Result<Mat> {
    if images.nrows() != raw.n_spots() {
        return Err(SealError::DimensionMismatch(format!(
            "{}: {} images for {} spots",
            raw.sample_id,
            images.nrows(),
            raw.n_spots()
        )));
    }
    let at: HashMap<&str, usize> = raw.barcodes.iter().enumerate().map(|(i, b)| (b.as_str(), i)).collect();
    let rows: Vec<usize> = kept.barcodes.iter().map(|b| at[b.as_str()]).collect();
    Ok(images.select(Axis(0), &rows))
}

/// Runs rename → harmonize → prevalence filter → empty-spot removal →
/// normalization → log1p → HVG panel → smoothing → patient split.
pub fn preprocess(raw_root: &Path, cfg: &PreprocessConfig) -> Result<Dataset> {
    let mut tables = load_dataset(raw_root)?;
    if let Some(m) = &cfg.mapping_file {
        let mapping = read_mapping(Path::new(m))?;
        tables = tables.iter().map(|t| rename_genes(t, &mapping)).collect::<Result<_>>()?;
    }
    let mut raw_images: HashMap<String, Mat> = HashMap::new();
    for t in &tables {
        let p = sample_dir(raw_root, &t.sample_id).join(IMAGE_FILE);
        if p.exists() {
            raw_images.insert(t.sample_id.clone(), EmbeddingBlob::read(&p)?.to_matrix());
        }
    }
    let originals: HashMap<String, SpotTable> = tables.iter().map(|t| (t.sample_id.clone(), t.clone())).collect();

    let h = harmonize_panels(tables, cfg.min_overlap)?;
    for d in &h.dropped {
        log::warn!("sample {d} dropped during panel harmonization");
    }
    let filtered = filter_genes_by_prevalence(&h.kept, cfg.min_prevalence)?;
    let logged: Vec<SpotTable> = filtered
        .iter()
        .map(|t| {
            let t = drop_empty_spots(t)?;
            log1p_transform(&count_normalize(&t, cfg.target_sum)?)
        })
        .collect::<Result<_>>()?;

    let n_genes = logged[0].n_genes();
    let hvg = select_hvg(&logged, cfg.n_hvg.min(n_genes), cfg.hvg_bins)?;
    let supplement = match &cfg.supplement_file {
        Some(f) => {
            let all = read_gene_list(Path::new(f))?;
            let (present, missing): (Vec<String>, Vec<String>) = all.into_iter().partition(|g| logged[0].gene_names.contains(g));
            if !missing.is_empty() {
                log::warn!("{} supplement genes are not in the shared panel", missing.len());
            }
            present
        }
        None => Vec::new(),
    };
    let panel = supplement_panel(&hvg, &supplement);

    let mut samples = Vec::with_capacity(logged.len());
    for t in &logged {
        let t = t.restrict_to(&panel.genes)?;
        let lattice = build_hex_adjacency(&t)?;
        let table = smooth_local(&t, &lattice)?;
        let images = match raw_images.get(&table.sample_id) {
            Some(img) => Some(realign_images(&originals[&table.sample_id], &table, img)?),
            None => None,
        };
        samples.push(ProcessedSample { table, images });
    }
    let tables: Vec<SpotTable> = samples.iter().map(|s| s.table.clone()).collect();
    let split = split_by_patient(&tables, cfg.split_ratios, cfg.seed)?;
    Ok(Dataset { panel, split, samples })
}

fn write_spots(path: &Path, t: &SpotTable) -> Result<()> {
    let mut s = String::from("barcode\tarray_row\tarray_col\tx_um\ty_um\n");
    for (b, c) in t.barcodes.iter().zip(&t.coords) {
        let _ = writeln!(s, "{b}\t{}\t{}\t{}\t{}", c.row, c.col, c.x_um, c.y_um);
    }
    write_atomic(path, s.as_bytes())
}

fn read_spots(path: &Path) -> Result<(Vec<String>, Vec<SpotCoord>)> {
    if !path.exists() {
        return Err(SealError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| SealError::io(path, e))?;
    let mut barcodes = Vec::new();
    let mut coords = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || SealError::Malformed(format!("{}:{}: bad spot line", path.display(), ln + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        barcodes.push(f[0].to_string());
        coords.push(SpotCoord {
            row: f[1].parse().map_err(|_| bad())?,
            col: f[2].parse().map_err(|_| bad())?,
            x_um: f[3].parse().map_err(|_| bad())?,
            y_um: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok((barcodes, coords))
}

impl Dataset {
    pub fn write(&self, root: &Path, cfg: &PreprocessConfig) -> Result<()> {
        self.panel.write(&root.join("panel.tsv"))?;
        self.split.write(&root.join("split.tsv"))?;
        let metas: Vec<SampleMeta> = self
            .samples
            .iter()
            .map(|s| SampleMeta {
                sample_id: s.table.sample_id.clone(),
                patient_id: s.table.patient_id.clone(),
                organ: s.table.organ.clone(),
                domain_id: s.table.domain_id,
            })
            .collect();
        write_sample_index(&root.join("samples.tsv"), &metas)?;
        for s in &self.samples {
            let dir = sample_dir(root, &s.table.sample_id);
            write_spots(&dir.join("spots.tsv"), &s.table)?;
            EmbeddingBlob::from_matrix(&s.table.values).write(&dir.join("expr.bin"))?;
            if let Some(img) = &s.images {
                EmbeddingBlob::from_matrix(img).write(&dir.join(IMAGE_FILE))?;
            }
        }
        let json = serde_json::to_string_pretty(cfg).expect("config serializes");
        write_atomic(&root.join("preprocess.json"), json.as_bytes())
    }

    pub fn read(root: &Path) -> Result<Dataset> {
        let panel = GenePanel::read(&root.join("panel.tsv"))?;
        let split = SplitManifest::read(&root.join("split.tsv"))?;
        let metas = read_sample_index(&root.join("samples.tsv"))?;
        let mut samples = Vec::with_capacity(metas.len());
        for m in metas {
            let dir = sample_dir(root, &m.sample_id);
            let (barcodes, coords) = read_spots(&dir.join("spots.tsv"))?;
            let values = EmbeddingBlob::read(&dir.join("expr.bin"))?.to_matrix();
            if values.dim() != (barcodes.len(), panel.len()) {
                return Err(SealError::DimensionMismatch(format!(
                    "{}: expression is {:?}, expected {} spots × {} genes",
                    m.sample_id,
                    values.dim(),
                    barcodes.len(),
                    panel.len()
                )));
            }
            let img_path = dir.join(IMAGE_FILE);
            let images = if img_path.exists() {
                let img = EmbeddingBlob::read(&img_path)?.to_matrix();
                if img.nrows() != barcodes.len() {
                    return Err(SealError::DimensionMismatch(format!(
                        "{}: {} images for {} spots",
                        m.sample_id,
                        img.nrows(),
                        barcodes.len()
                    )));
                }
                Some(img)
            } else {
                None
            };
            let table = SpotTable {
                sample_id: m.sample_id,
                patient_id: m.patient_id,
                organ: m.organ,
                domain_id: m.domain_id,
                barcodes,
                coords,
                values,
                gene_names: panel.genes.clone(),
                stage: Stage::Smoothed,
            };
            table.validate()?;
            samples.push(ProcessedSample { table, images });
        }
        Ok(Dataset { panel, split, samples })
    }
}

/// Stacks every sample's expression, in sample order.
pub fn stack_expression(samples: &[&ProcessedSample]) -> Result<Array2<f64>> {
    Ok(pool(samples)?.expr)
}

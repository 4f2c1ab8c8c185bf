use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::linear::{pca_fit, pca_transform, ridge_fit, ridge_predict};
use super::metrics::{mean_sd, metric_mse, metric_pcc, metric_spearman};
use crate::blob::write_atomic;
use crate::error::{Result, SealError};
use seal_autodiff::Mat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub k: usize,
    pub n_components: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k: 5,
            n_components: 256,
            alpha: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub genes: Vec<String>,
    /// `k × G` held-out metrics.
    pub pcc: Mat,
    pub mse: Mat,
    pub spearman: Mat,
    /// Fold index of every spot.
    pub folds: Vec<usize>,
    /// Number of (fold, gene) cells whose correlation was degenerate.
    pub degenerate: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneSummary {
    pub pcc: (f64, f64),
    pub mse: (f64, f64),
    pub spearman: (f64, f64),
}

impl ProbeResult {
    pub fn gene_summary(&self, g: usize) -> GeneSummary {
        let col = |m: &Mat| mean_sd(&m.column(g).to_vec());
        GeneSummary {
            pcc: col(&self.pcc),
            mse: col(&self.mse),
            spearman: col(&self.spearman),
        }
    }

    /// Per-gene fold means, then the mean over genes.
    pub fn mean_pcc(&self) -> f64 {
        let per_gene = self.pcc.mean_axis(Axis(0)).expect("k ≥ 1");
        per_gene.mean().unwrap_or(f64::NAN)
    }

    pub fn mean_spearman(&self) -> f64 {
        self.spearman.mean_axis(Axis(0)).expect("k ≥ 1").mean().unwrap_or(f64::NAN)
    }

    pub fn mean_mse(&self) -> f64 {
        self.mse.mean_axis(Axis(0)).expect("k ≥ 1").mean().unwrap_or(f64::NAN)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("gene\tpcc_mean\tpcc_sd\tmse_mean\tmse_sd\tspearman_mean\tspearman_sd\n");
        for (g, name) in self.genes.iter().enumerate() {
            let m = self.gene_summary(g);
            let _ = writeln!(
                s,
                "{name}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.pcc.0, m.pcc.1, m.mse.0, m.mse.1, m.spearman.0, m.spearman.1
            );
        }
        s
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }
}

/// Seeded shuffle, then fold `i mod k` by shuffled position.
pub fn fold_assignments(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

struct FoldMetrics {
    pcc: Vec<f64>,
    mse: Vec<f64>,
    spearman: Vec<f64>,
    degenerate: usize,
}

fn run_fold(x: &Mat, y: &Mat, folds: &[usize], f: usize, cfg: &ProbeConfig) -> Result<FoldMetrics> {
    let train: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] != f).collect();
    let test: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] == f).collect();
    let (xtr, ytr) = (x.select(Axis(0), &train), y.select(Axis(0), &train));
    let (xte, yte) = (x.select(Axis(0), &test), y.select(Axis(0), &test));
    let nc = cfg.n_components.min(x.ncols()).min(train.len());
    let pca = pca_fit(&xtr, nc)?;
    let ztr = pca_transform(&xtr, &pca)?;
    let zte = pca_transform(&xte, &pca)?;
    // z-score each component with training statistics
    let mu = ztr.mean_axis(Axis(0)).expect("non-empty");
    let sd = ztr.std_axis(Axis(0), if ztr.nrows() > 1 { 1.0 } else { 0.0 }).mapv(|s| if s > 0.0 { s } else { 1.0 });
    let ztr = (&ztr - &mu) / &sd;
    let zte = (&zte - &mu) / &sd;
    let model = ridge_fit(&ztr, &ytr, cfg.alpha)?;
    let pred = ridge_predict(&zte, &model)?;
    let g = y.ncols();
    let mut out = FoldMetrics {
        pcc: Vec::with_capacity(g),
        mse: Vec::with_capacity(g),
        spearman: Vec::with_capacity(g),
        degenerate: 0,
    };
    for j in 0..g {
        let (p, t) = (pred.column(j).to_vec(), yte.column(j).to_vec());
        let c = metric_pcc(&p, &t)?;
        let s = metric_spearman(&p, &t)?;
        out.degenerate += usize::from(c.degenerate);
        out.pcc.push(c.value);
        out.spearman.push(s.value);
        out.mse.push(metric_mse(&p, &t)?);
    }
    Ok(out)
}

/// k-fold PCA + standardized ridge probe from embeddings to expression.
pub fn kfold_probe(embeddings: &Mat, targets: &Mat, genes: &[String], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = embeddings.nrows();
    if targets.nrows() != n || genes.len() != targets.ncols() {
        return Err(SealError::DimensionMismatch(format!(
            "{n} embeddings, {} target rows, {} targets for {} gene names",
            targets.nrows(),
            targets.ncols(),
            genes.len()
        )));
    }
    if cfg.k < 2 || cfg.k > n {
        return Err(SealError::InvalidArgument(format!("k = {} must be in 2..={n}", cfg.k)));
    }
    let folds = fold_assignments(n, cfg.k, cfg.seed);
    let per_fold: Vec<FoldMetrics> = (0..cfg.k)
        .into_par_iter()
        .map(|f| run_fold(embeddings, targets, &folds, f, cfg))
        .collect::<Result<_>>()?;
    let g = targets.ncols();
    let stack = |sel: fn(&FoldMetrics) -> &Vec<f64>| Array2::from_shape_fn((cfg.k, g), |(f, j)| sel(&per_fold[f])[j]);
    let degenerate = per_fold.iter().map(|m| m.degenerate).sum();
    if degenerate > 0 {
        log::warn!("{degenerate} fold/gene correlations had zero variance and were set to 0");
    }
    Ok(ProbeResult {
        genes: genes.to_vec(),
        pcc: stack(|m| &m.pcc),
        mse: stack(|m| &m.mse),
        spearman: stack(|m| &m.spearman),
        folds,
        degenerate,
    })
}

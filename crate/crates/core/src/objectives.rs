//! Reconstruction, contrastive and domain-adversarial losses.
//!
//! Each loss has a tape form taking [`Var`]s and a plain form on matrices
//! that builds a throwaway graph.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use seal_autodiff::{Graph, Mat, ParamStore, Var};

use crate::error::{Result, SealError};
use crate::nn::{Linear, Session};

/// Zero-norm guard for cross-correlation columns.
pub const CORR_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_inv: f64,
    pub lambda_red: f64,
    pub lambda_mse: f64,
    pub lambda_contrast: f64,
    pub lambda_rec_img: f64,
    pub lambda_rec_gene: f64,
    pub lambda_da: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_inv: 1.0,
            lambda_red: 5e-3,
            lambda_mse: 1.0,
            lambda_contrast: 1.0,
            lambda_rec_img: 1.0,
            lambda_rec_gene: 1.0,
            lambda_da: 0.001,
            tau: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_inv", self.lambda_inv),
            ("lambda_red", self.lambda_red),
            ("lambda_mse", self.lambda_mse),
            ("lambda_contrast", self.lambda_contrast),
            ("lambda_rec_img", self.lambda_rec_img),
            ("lambda_rec_gene", self.lambda_rec_gene),
            ("lambda_da", self.lambda_da),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SealError::Config(format!("{name} = {v} must be a finite non-negative number")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(SealError::Config(format!("tau = {} must be positive", self.tau)));
        }
        Ok(())
    }
}

fn same_shape(g: &Graph, x: Var, y: Var, what: &str) -> Result<()> {
    if g.shape(x) != g.shape(y) {
        return Err(SealError::DimensionMismatch(format!(
            "{what}: {:?} vs {:?}",
            g.shape(x),
            g.shape(y)
        )));
    }
    Ok(())
}

fn eye(n: usize) -> Mat {
    Array2::eye(n)
}

pub fn mse_loss_graph(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    same_shape(g, x, y, "mse_loss")?;
    let d = g.sub(x, y);
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// `C = x̂ᵀŷ` with columns scaled by `1/max(‖·‖, eps)`; `x` is the target.
pub fn cross_correlation_graph(g: &mut Graph, x: Var, y: Var, eps: f64) -> Result<Var> {
    same_shape(g, x, y, "cross_correlation")?;
    let xn = g.normalize_cols(x, eps);
    let yn = g.normalize_cols(y, eps);
    let xt = g.transpose(xn);
    Ok(g.matmul(xt, yn))
}

pub fn invariance_loss_graph(g: &mut Graph, c: Var) -> Var {
    let n = g.shape(c).0;
    let i = g.constant(eye(n));
    let masked = g.mul(c, i);
    let diag = g.sum_cols(masked);
    let neg = g.neg(diag);
    let off = g.add_scalar(neg, 1.0);
    let sq = g.square(off);
    g.sum(sq)
}

pub fn redundancy_loss_graph(g: &mut Graph, c: Var) -> Var {
    let n = g.shape(c).0;
    let mask = g.constant(Array2::ones((n, n)) - eye(n));
    let off = g.mul(c, mask);
    let sq = g.square(off);
    g.sum(sq)
}

/// `λ₀·L_inv + λ₁·L_red + λ₂·L_mse` between target `x` and prediction `y`.
pub fn reconstruction_loss_graph(g: &mut Graph, x: Var, y: Var, w: &LossWeights) -> Result<Var> {
    let c = cross_correlation_graph(g, x, y, CORR_EPS)?;
    let inv = invariance_loss_graph(g, c);
    let red = redundancy_loss_graph(g, c);
    let mse = mse_loss_graph(g, x, y)?;
    let a = g.scale(inv, w.lambda_inv);
    let b = g.scale(red, w.lambda_red);
    let m = g.scale(mse, w.lambda_mse);
    let ab = g.add(a, b);
    Ok(g.add(ab, m))
}

/// Symmetric InfoNCE over cosine similarities; rows of `zp` and `zg` are matched pairs.
pub fn info_nce_graph(g: &mut Graph, zp: Var, zg: Var, tau: f64) -> Result<Var> {
    same_shape(g, zp, zg, "info_nce")?;
    if !(tau > 0.0) {
        return Err(SealError::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let n = g.shape(zp).0;
    if n == 0 {
        return Err(SealError::Empty("info_nce on an empty batch".into()));
    }
    for (name, z) in [("image", zp), ("gene", zg)] {
        if let Some(i) = g.value(z).rows().into_iter().position(|r| r.iter().all(|v| *v == 0.0)) {
            return Err(SealError::Numerical(format!("{name} embedding row {i} has zero norm")));
        }
    }
    let pn = g.normalize_rows(zp);
    let gn = g.normalize_rows(zg);
    let gt = g.transpose(gn);
    let sim = g.matmul(pn, gt);
    let logits = g.scale(sim, 1.0 / tau);
    let lt = g.transpose(logits);
    let i2g = g.log_softmax(logits);
    let g2i = g.log_softmax(lt);
    let both = g.add(i2g, g2i);
    let i = g.constant(eye(n));
    let diag = g.mul(both, i);
    let s = g.sum(diag);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn cross_entropy_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = g.shape(logits);
    if labels.len() != n {
        return Err(SealError::DimensionMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(SealError::IndexOutOfRange(format!("label {bad} with {k} classes")));
    }
    let onehot = Array2::from_shape_fn((n, k), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 });
    let ls = g.log_softmax(logits);
    let oh = g.constant(onehot);
    let picked = g.mul(ls, oh);
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

pub fn grl(g: &mut Graph, x: Var, lambda: f64) -> Var {
    g.grl(x, lambda)
}

/// Domain classifier `d → d → n_domains` behind a gradient-reversal layer.
#[derive(Debug, Clone)]
pub struct DomainHead {
    pub hidden: Linear,
    pub out: Linear,
    pub n_domains: usize,
    pub grl_lambda: f64,
}

impl DomainHead {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, n_domains: usize, grl_lambda: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_domains == 0 {
            return Err(SealError::InvalidArgument("domain head needs at least one domain".into()));
        }
        Ok(Self {
            hidden: Linear::new(store, &format!("{prefix}.hidden"), d, d, true, rng),
            out: Linear::new(store, &format!("{prefix}.out"), d, n_domains, true, rng),
            n_domains,
            grl_lambda,
        })
    }

    pub fn logits(&self, s: &mut Session, z: Var) -> Result<Var> {
        let r = s.graph.grl(z, self.grl_lambda);
        let h = self.hidden.forward(s, r)?;
        let h = s.graph.relu(h);
        self.out.forward(s, h)
    }
}

/// Cross-entropy of the head over both modality batches, each labeled by `domains`.
/// A single-domain head is degenerate and contributes a constant zero.
pub fn domain_loss(s: &mut Session, head: &DomainHead, zp: Var, zg: Var, domains: &[usize]) -> Result<Var> {
    if let Some(bad) = domains.iter().find(|&&l| l >= head.n_domains) {
        return Err(SealError::IndexOutOfRange(format!(
            "domain label {bad} with {} domains",
            head.n_domains
        )));
    }
    if head.n_domains == 1 {
        return Ok(s.graph.constant_scalar(0.0));
    }
    let z = s.graph.concat_rows(&[zp, zg]);
    let logits = head.logits(s, z)?;
    let labels: Vec<usize> = domains.iter().chain(domains).copied().collect();
    cross_entropy_graph(&mut s.graph, logits, &labels)
}

/// Unweighted terms of the alignment objective.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Parts {
    pub info_nce: Var,
    pub rec_img: Var,
    pub rec_gene: Var,
    pub da: Var,
}

pub const STAGE2_TERMS: [&str; 4] = ["infonce", "rec_img", "rec_gene", "da"];

/// Weighted sum and the unweighted breakdown keyed by [`STAGE2_TERMS`].
pub fn stage2_loss_graph(g: &mut Graph, p: &Stage2Parts, w: &LossWeights) -> (Var, BTreeMap<String, f64>) {
    let terms = [
        (STAGE2_TERMS[0], p.info_nce, w.lambda_contrast),
        (STAGE2_TERMS[1], p.rec_img, w.lambda_rec_img),
        (STAGE2_TERMS[2], p.rec_gene, w.lambda_rec_gene),
        (STAGE2_TERMS[3], p.da, w.lambda_da),
    ];
    let mut breakdown = BTreeMap::new();
    let mut total: Option<Var> = None;
    for (name, v, lam) in terms {
        breakdown.insert(name.to_string(), g.scalar(v));
        let t = g.scale(v, lam);
        total = Some(match total {
            Some(acc) => g.add(acc, t),
            None => t,
        });
    }
    (total.expect("four terms"), breakdown)
}

// ---- plain forms ----

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub c: Mat,
}

fn eval2(x: &Mat, y: &Mat, f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let out = f(&mut g, xv, yv)?;
    Ok(g.scalar(out))
}

pub fn mse_loss(x: &Mat, y: &Mat) -> Result<f64> {
    eval2(x, y, mse_loss_graph)
}

pub fn cross_correlation(x: &Mat, y: &Mat, eps: f64) -> Result<CorrelationMatrix> {
    if !(eps > 0.0) {
        return Err(SealError::InvalidArgument(format!("eps {eps} must be positive")));
    }
    if x.nrows() == 0 {
        return Err(SealError::Empty("cross_correlation on an empty batch".into()));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let c = cross_correlation_graph(&mut g, xv, yv, eps)?;
    Ok(CorrelationMatrix { c: g.value(c).clone() })
}

pub fn invariance_loss(c: &CorrelationMatrix) -> f64 {
    c.c.diag().iter().map(|v| (1.0 - v).powi(2)).sum()
}

pub fn redundancy_loss(c: &CorrelationMatrix) -> f64 {
    c.c.indexed_iter().filter(|((i, j), _)| i != j).map(|(_, v)| v * v).sum()
}

pub fn reconstruction_loss(x: &Mat, y: &Mat, w: &LossWeights) -> Result<f64> {
    eval2(x, y, |g, a, b| reconstruction_loss_graph(g, a, b, w))
}

pub fn info_nce(zp: &Mat, zg: &Mat, tau: f64) -> Result<f64> {
    eval2(zp, zg, |g, a, b| info_nce_graph(g, a, b, tau))
}

/// Plain-value composite: `(total, breakdown)`.
pub fn stage2_loss(info_nce: f64, rec_img: f64, rec_gene: f64, da: f64, w: &LossWeights) -> (f64, BTreeMap<String, f64>) {
    let vals = [info_nce, rec_img, rec_gene, da];
    let lams = [w.lambda_contrast, w.lambda_rec_img, w.lambda_rec_gene, w.lambda_da];
    let total = vals.iter().zip(&lams).map(|(v, l)| v * l).sum();
    let breakdown = STAGE2_TERMS.iter().zip(vals).map(|(n, v)| (n.to_string(), v)).collect();
    (total, breakdown)
}

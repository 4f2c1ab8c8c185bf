//! Bag-level pooling of patch embeddings.

use ndarray::{Array1, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SealError};
use crate::nn::uniform;
use seal_autodiff::{sigmoid, Mat};

pub fn mean_pool(bag: &Mat) -> Result<Array1<f64>> {
    bag.mean_axis(Axis(0)).ok_or_else(|| SealError::Empty("mean_pool on an empty bag".into()))
}

/// Gated attention: `a_k = softmax_k(wᵀ(tanh(V h_k) ⊙ σ(U h_k)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPool {
    /// `h × d`
    pub v: Mat,
    /// `h × d`
    pub u: Mat,
    pub w: Array1<f64>,
}

impl AttentionPool {
    pub fn new(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let wb = 1.0 / (hidden as f64).sqrt();
        Self {
            v: uniform(rng, (hidden, d), bound),
            u: uniform(rng, (hidden, d), bound),
            w: uniform(rng, (1, hidden), wb).row(0).to_owned(),
        }
    }
}

/// Returns the pooled embedding and the per-item attention scores.
pub fn abmil_pool(bag: &Mat, p: &AttentionPool) -> Result<(Array1<f64>, Vec<f64>)> {
    if bag.nrows() == 0 {
        return Err(SealError::Empty("abmil_pool on an empty bag".into()));
    }
    if bag.ncols() != p.v.ncols() {
        return Err(SealError::DimensionMismatch(format!(
            "attention pool expects width {}, bag has {}",
            p.v.ncols(),
            bag.ncols()
        )));
    }
    let a = bag.dot(&p.v.t()).mapv(f64::tanh);
    let g = bag.dot(&p.u.t()).mapv(sigmoid);
    let logits = (a * g).dot(&p.w);
    let m = logits.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
    let e = logits.mapv(|x| (x - m).exp());
    let scores = &e / e.sum();
    let pooled = scores.dot(bag);
    Ok((pooled, scores.to_vec()))
}

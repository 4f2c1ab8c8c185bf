//! Layers shared by the omics and vision models.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use seal_autodiff::{Graph, Mat, ParamId, ParamStore, Var};

use crate::error::{Result, SealError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the tape, a read-only view of the parameters, the mode,
/// and a private generator for dropout masks.
pub struct Session<'s> {
    pub graph: Graph,
    pub store: &'s ParamStore,
    pub mode: Mode,
    pub buffer_updates: Vec<(ParamId, Mat)>,
    rng: ChaCha8Rng,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            buffer_updates: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training() || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let shape = self.graph.shape(x);
        let mask = Array2::from_shape_fn(shape, |_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.graph.constant(mask);
        self.graph.mul(x, m)
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Mat {
    Array2::from_shape_fn(shape, |_| rng.random_range(-bound..=bound))
}

pub fn normal(rng: &mut ChaCha8Rng, shape: (usize, usize), sd: f64) -> Mat {
    let d = Normal::new(0.0, sd).expect("finite sd");
    Array2::from_shape_fn(shape, |_| d.sample(rng))
}

/// `y = x Wᵀ + b` with `W` stored as `[out × in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform init in `±1/√in` for weights and bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, (out_dim, in_dim), bound), true);
        let b = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, (1, out_dim), bound), true));
        Self { w, b, in_dim, out_dim }
    }

    pub fn from_parts(w: ParamId, b: Option<ParamId>, in_dim: usize, out_dim: usize) -> Self {
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (_, cols) = s.graph.shape(x);
        if cols != self.in_dim {
            return Err(SealError::DimensionMismatch(format!(
                "linear layer expects {} inputs, got {cols}",
                self.in_dim
            )));
        }
        let w = s.p(self.w);
        let wt = s.graph.transpose(w);
        let y = s.graph.matmul(x, wt);
        Ok(match self.b {
            Some(b) => {
                let bv = s.p(b);
                s.graph.add(y, bv)
            }
            None => y,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        v.extend(self.b);
        v
    }
}

/// Batch normalization over the batch dimension, with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, dim)), true),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, dim)), true),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Array2::zeros((1, dim))),
            running_var: store.add_buffer(format!("{name}.running_var"), Array2::ones((1, dim))),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let gamma = s.p(self.gamma);
        let beta = s.p(self.beta);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm(x, gamma, beta, self.eps);
                let n = s.graph.shape(x).0 as f64;
                let m = self.momentum;
                let rm = s.store.value(self.running_mean);
                let rv = s.store.value(self.running_var);
                let new_mean = Array2::from_shape_fn(rm.dim(), |(_, j)| (1.0 - m) * rm[[0, j]] + m * stats.mean[j]);
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let new_var =
                    Array2::from_shape_fn(rv.dim(), |(_, j)| (1.0 - m) * rv[[0, j]] + m * stats.var[j] * unbias);
                s.buffer_updates.push((self.running_mean, new_mean));
                s.buffer_updates.push((self.running_var, new_var));
                y
            }
            Mode::Eval => {
                let rm = s.store.value(self.running_mean).clone();
                let inv = s.store.value(self.running_var).mapv(|v| 1.0 / (v + self.eps).sqrt());
                let rm = s.graph.constant(rm);
                let inv = s.graph.constant(inv);
                let c = s.graph.sub(x, rm);
                let xhat = s.graph.mul(c, inv);
                let y = s.graph.mul(xhat, gamma);
                s.graph.add(y, beta)
            }
        }
    }
}

/// `Linear → BatchNorm → ReLU → dropout`.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub linear: Linear,
    pub norm: BatchNorm1d,
    pub dropout: f64,
}

impl DenseBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear: Linear::new(store, &format!("{name}.linear"), in_dim, out_dim, true, rng),
            norm: BatchNorm1d::new(store, &format!("{name}.norm"), out_dim),
            dropout,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.linear.forward(s, x)?;
        let h = self.norm.forward(s, h);
        let h = s.graph.relu(h);
        Ok(s.dropout(h, self.dropout))
    }
}

/// Applies pending running-statistic updates collected during a forward pass.
pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(ParamId, Mat)>) {
    for (id, v) in updates {
        store.set_value(id, v);
    }
}

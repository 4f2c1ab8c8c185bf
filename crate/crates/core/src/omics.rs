//! Transcriptomics autoencoder: Gaussian encoder, planar flows, mirrored decoder.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use seal_autodiff::{softplus, Graph, Mat, ParamId, ParamStore, Var};

use crate::error::{Result, SealError};
use crate::nn::{normal, DenseBlock, Linear, Mode, Session};

/// Below this, `|1 + ûᵀψ|` is treated as a singular flow.
pub const SINGULAR_EPS: f64 = 1e-12;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub input_dim: usize,
    /// Encoder widths; the last one is the pre-latent width and must equal `latent_dim`.
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    pub n_flows: usize,
    pub encoder_dropout: f64,
    pub decoder_dropout: f64,
    pub beta_kl: f64,
}

impl VaeConfig {
    /// Default stack `[1024, d]`, four flows.
    pub fn new(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![1024, latent_dim],
            latent_dim,
            n_flows: 4,
            encoder_dropout: 0.0,
            decoder_dropout: 0.0,
            beta_kl: 1e-2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(SealError::Config("input_dim and latent_dim must be positive".into()));
        }
        match self.hidden_dims.last() {
            Some(&h) if h == self.latent_dim => {}
            _ => {
                return Err(SealError::Config(format!(
                    "hidden_dims {:?} must end with latent_dim {}",
                    self.hidden_dims, self.latent_dim
                )))
            }
        }
        if self.hidden_dims.contains(&0) {
            return Err(SealError::Config("hidden widths must be positive".into()));
        }
        for (name, p) in [("encoder_dropout", self.encoder_dropout), ("decoder_dropout", self.decoder_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(SealError::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        if !(self.beta_kl >= 0.0) {
            return Err(SealError::Config(format!("beta_kl {} must be non-negative", self.beta_kl)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanarFlowParams {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
}

impl PlanarFlowParams {
    /// Builds flow parameters from an unconstrained `u`, replacing it with
    /// `û = u + (softplus(wᵀu) − 1 − wᵀu)·w/‖w‖²` so that `wᵀû ≥ −1`.
    pub fn projected(u: &[f64], w: &[f64], b: f64) -> Self {
        Self {
            u: project_u(u, w),
            w: w.to_vec(),
            b,
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            u: vec![0.0; d],
            w: vec![0.0; d],
            b: 0.0,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn project_u(u: &[f64], w: &[f64]) -> Vec<f64> {
    let wn2 = dot(w, w);
    if wn2 == 0.0 {
        return u.to_vec();
    }
    let wu = dot(w, u);
    let m = (softplus(wu) - 1.0 - wu) / wn2;
    u.iter().zip(w).map(|(ui, wi)| ui + m * wi).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub z_k: Vec<f64>,
    pub sum_log_det: f64,
}

/// `z₀ = μ + exp(½·log_var) ⊙ ε`.
pub fn reparameterize(p: &GaussianPosterior, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != p.mu.len() || p.log_var.len() != p.mu.len() {
        return Err(SealError::DimensionMismatch(format!(
            "posterior of width {} with eps of width {}",
            p.mu.len(),
            eps.len()
        )));
    }
    Ok(p.mu
        .iter()
        .zip(&p.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// One planar step with already-projected parameters.
pub fn planar_flow_step(z: &[f64], p: &PlanarFlowParams) -> Result<(Vec<f64>, f64)> {
    if p.u.len() != z.len() || p.w.len() != z.len() {
        return Err(SealError::DimensionMismatch(format!(
            "flow of width {} applied to z of width {}",
            p.u.len(),
            z.len()
        )));
    }
    let t = (dot(&p.w, z) + p.b).tanh();
    let det = 1.0 + (1.0 - t * t) * dot(&p.u, &p.w);
    if !(det.abs() >= SINGULAR_EPS) {
        return Err(SealError::Numerical(format!("singular planar flow: |1 + ûᵀψ| = {}", det.abs())));
    }
    let z_next = z.iter().zip(&p.u).map(|(zi, ui)| zi + ui * t).collect();
    Ok((z_next, det.abs().ln()))
}

pub fn apply_flows(z0: &[f64], flows: &[PlanarFlowParams]) -> Result<FlowResult> {
    let mut z = z0.to_vec();
    let mut sum_log_det = 0.0;
    for f in flows {
        let (next, ld) = planar_flow_step(&z, f)?;
        z = next;
        sum_log_det += ld;
    }
    Ok(FlowResult { z_k: z, sum_log_det })
}

fn log_std_normal(z: &[f64]) -> f64 {
    z.iter().map(|v| -0.5 * LOG_2PI - 0.5 * v * v).sum()
}

/// `log q₀(z₀)` for a diagonal Gaussian.
pub fn log_q0(p: &GaussianPosterior, z0: &[f64]) -> f64 {
    p.mu
        .iter()
        .zip(&p.log_var)
        .zip(z0)
        .map(|((m, lv), z)| -0.5 * LOG_2PI - 0.5 * lv - 0.5 * (z - m).powi(2) / lv.exp())
        .sum()
}

/// Analytic KL without flows; single-sample free energy
/// `log q₀(z₀) − Σ log|det| − log N(z_K; 0, I)` with flows.
pub fn variational_regularizer(p: &GaussianPosterior, fr: &FlowResult, z0: &[f64], n_flows: usize) -> f64 {
    if n_flows == 0 {
        -0.5 * p
            .mu
            .iter()
            .zip(&p.log_var)
            .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
            .sum::<f64>()
    } else {
        log_q0(p, z0) - fr.sum_log_det - log_std_normal(&fr.z_k)
    }
}

// ---- batched, differentiable forms ----

/// Projection of `u` on the tape (`u`, `w` are `1×d`).
pub fn project_u_graph(g: &mut Graph, u: Var, w: Var) -> Var {
    if g.value(w).iter().all(|v| *v == 0.0) {
        return u;
    }
    let wu_el = g.mul(w, u);
    let wu = g.sum(wu_el);
    let sp = g.softplus(wu);
    let t = g.sub(sp, wu);
    let m = g.add_scalar(t, -1.0);
    let w2 = g.square(w);
    let wn2 = g.sum(w2);
    let coef = g.div(m, wn2);
    let shift = g.mul(coef, w);
    g.add(u, shift)
}

/// Planar step on a `B×d` batch with projected `u_hat`. Returns `(z′, log_det [B×1])`.
pub fn planar_flow_graph(g: &mut Graph, z: Var, u_hat: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let wt = g.transpose(w);
    let a0 = g.matmul(z, wt);
    let a = g.add(a0, b);
    let t = g.tanh(a);
    let step = g.matmul(t, u_hat);
    let z_next = g.add(z, step);
    let wu_el = g.mul(w, u_hat);
    let wu = g.sum(wu_el);
    let t2 = g.square(t);
    let one_minus = {
        let n = g.neg(t2);
        g.add_scalar(n, 1.0)
    };
    let psi_u = g.mul(one_minus, wu);
    let det = g.add_scalar(psi_u, 1.0);
    if let Some(v) = g.value(det).iter().find(|v| !(v.abs() >= SINGULAR_EPS)) {
        return Err(SealError::Numerical(format!("singular planar flow: |1 + ûᵀψ| = {}", v.abs())));
    }
    let ad = g.abs(det);
    let ld = g.log(ad);
    Ok((z_next, ld))
}

/// Batch mean of the regularizer. `eps` is the noise used to draw `z₀`.
pub fn regularizer_graph(g: &mut Graph, mu: Var, log_var: Var, eps: &Mat, z_k: Var, sum_log_det: Option<Var>) -> Var {
    let n = g.shape(mu).0 as f64;
    match sum_log_det {
        None => {
            let mu2 = g.square(mu);
            let ev = g.exp(log_var);
            let a = g.add_scalar(log_var, 1.0);
            let b = g.sub(a, mu2);
            let c = g.sub(b, ev);
            let s = g.sum(c);
            g.scale(s, -0.5 / n)
        }
        Some(sld) => {
            let d = eps.ncols() as f64;
            // log q0 = Σ −½log2π − ½lv − ½ε²
            let eps_sq: f64 = eps.iter().map(|e| e * e).sum();
            let slv = g.sum(log_var);
            let lq0 = g.scale(slv, -0.5);
            let lq0 = g.add_scalar(lq0, -0.5 * LOG_2PI * d * n - 0.5 * eps_sq);
            // −log N(zK) = Σ ½log2π + ½zK²
            let zk2 = g.square(z_k);
            let szk = g.sum(zk2);
            let nlp = g.scale(szk, 0.5);
            let nlp = g.add_scalar(nlp, 0.5 * LOG_2PI * d * n);
            let sld_total = g.sum(sld);
            let t = g.sub(lq0, sld_total);
            let t = g.add(t, nlp);
            g.scale(t, 1.0 / n)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FlowIds {
    pub u: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct OmicsVae {
    pub config: VaeConfig,
    pub encoder: Vec<DenseBlock>,
    pub mu_head: Linear,
    pub log_var_head: Linear,
    pub flows: Vec<FlowIds>,
    pub decoder: Vec<DenseBlock>,
    pub output: Linear,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct VaeOutput {
    pub mu: Var,
    pub log_var: Var,
    pub h: Var,
    pub z0: Var,
    pub z_k: Var,
    pub sum_log_det: Option<Var>,
    pub recon: Var,
    pub regularizer: Var,
}

impl OmicsVae {
    pub fn new(config: VaeConfig, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let mut encoder = Vec::new();
        let mut prev = config.input_dim;
        for (i, &h) in config.hidden_dims.iter().enumerate() {
            encoder.push(DenseBlock::new(store, &format!("{prefix}.enc{i}"), prev, h, config.encoder_dropout, rng));
            prev = h;
        }
        let mu_head = Linear::new(store, &format!("{prefix}.mu"), d, d, true, rng);
        let log_var_head = Linear::new(store, &format!("{prefix}.log_var"), d, d, true, rng);
        let flows = (0..config.n_flows)
            .map(|k| FlowIds {
                u: store.add(format!("{prefix}.flow{k}.u"), normal(rng, (1, d), 0.1), true),
                w: store.add(format!("{prefix}.flow{k}.w"), normal(rng, (1, d), 0.1), true),
                b: store.add(format!("{prefix}.flow{k}.b"), Array2::zeros((1, 1)), true),
            })
            .collect();
        let mut decoder = Vec::new();
        let mut prev = d;
        let n_hidden = config.hidden_dims.len();
        for (i, &h) in config.hidden_dims[..n_hidden - 1].iter().rev().enumerate() {
            decoder.push(DenseBlock::new(store, &format!("{prefix}.dec{i}"), prev, h, config.decoder_dropout, rng));
            prev = h;
        }
        let output = Linear::new(store, &format!("{prefix}.out"), prev, config.input_dim, true, rng);
        Ok(Self {
            config,
            encoder,
            mu_head,
            log_var_head,
            flows,
            decoder,
            output,
        })
    }

    /// Returns `(mu, log_var, h)`.
    pub fn encode(&self, s: &mut Session, x: Var) -> Result<(Var, Var, Var)> {
        let mut h = x;
        for block in &self.encoder {
            h = block.forward(s, h)?;
        }
        let mu = self.mu_head.forward(s, h)?;
        let log_var = self.log_var_head.forward(s, h)?;
        Ok((mu, log_var, h))
    }

    pub fn decode(&self, s: &mut Session, z: Var) -> Result<Var> {
        let mut h = z;
        for block in &self.decoder {
            h = block.forward(s, h)?;
        }
        self.output.forward(s, h)
    }

    /// Applies the projected flow chain; `None` log-det when there are no flows.
    pub fn flow(&self, s: &mut Session, z0: Var) -> Result<(Var, Option<Var>)> {
        let mut z = z0;
        let mut total: Option<Var> = None;
        for f in &self.flows {
            let u = s.p(f.u);
            let w = s.p(f.w);
            let b = s.p(f.b);
            let u_hat = project_u_graph(&mut s.graph, u, w);
            let (zn, ld) = planar_flow_graph(&mut s.graph, z, u_hat, w, b)?;
            z = zn;
            total = Some(match total {
                Some(t) => s.graph.add(t, ld),
                None => ld,
            });
        }
        Ok((z, total))
    }

    /// Full pass with caller-supplied noise `eps` (`B×d`).
    pub fn forward(&self, s: &mut Session, x: Var, eps: &Mat) -> Result<VaeOutput> {
        let (mu, log_var, h) = self.encode(s, x)?;
        if eps.dim() != s.graph.shape(mu) {
            return Err(SealError::DimensionMismatch(format!(
                "eps {:?} for latent batch {:?}",
                eps.dim(),
                s.graph.shape(mu)
            )));
        }
        let half = s.graph.scale(log_var, 0.5);
        let sigma = s.graph.exp(half);
        let e = s.graph.constant(eps.clone());
        let noise = s.graph.mul(sigma, e);
        let z0 = s.graph.add(mu, noise);
        let (z_k, sum_log_det) = self.flow(s, z0)?;
        let recon = self.decode(s, z_k)?;
        let regularizer = regularizer_graph(&mut s.graph, mu, log_var, eps, z_k, sum_log_det);
        Ok(VaeOutput {
            mu,
            log_var,
            h,
            z0,
            z_k,
            sum_log_det,
            recon,
            regularizer,
        })
    }

    /// Deterministic embedding used downstream: the flow chain applied to `mu`.
    pub fn embed(&self, store: &ParamStore, x: &Mat) -> Result<Mat> {
        let mut s = Session::new(store, Mode::Eval, 0);
        let xv = s.graph.constant(x.clone());
        let (mu, _, _) = self.encode(&mut s, xv)?;
        let (z, _) = self.flow(&mut s, mu)?;
        Ok(s.graph.value(z).clone())
    }

    /// Per-row posteriors in the given mode.
    pub fn posteriors(&self, store: &ParamStore, x: &Mat, mode: Mode) -> Result<Vec<GaussianPosterior>> {
        let mut s = Session::new(store, mode, 0);
        let xv = s.graph.constant(x.clone());
        let (mu, lv, _) = self.encode(&mut s, xv)?;
        let (mu, lv) = (s.graph.value(mu), s.graph.value(lv));
        Ok(mu
            .rows()
            .into_iter()
            .zip(lv.rows())
            .map(|(m, l)| GaussianPosterior {
                mu: m.to_vec(),
                log_var: l.to_vec(),
            })
            .collect())
    }

    /// Current flow parameters with the projection applied.
    pub fn flow_params(&self, store: &ParamStore) -> Vec<PlanarFlowParams> {
        self.flows
            .iter()
            .map(|f| {
                PlanarFlowParams::projected(
                    store.value(f.u).as_slice().expect("contiguous"),
                    store.value(f.w).as_slice().expect("contiguous"),
                    store.value(f.b)[[0, 0]],
                )
            })
            .collect()
    }

    pub fn parameter_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in self.encoder.iter().chain(&self.decoder) {
            ids.extend(b.linear.params());
            ids.extend([b.norm.gamma, b.norm.beta]);
        }
        ids.extend(self.mu_head.params());
        ids.extend(self.log_var_head.params());
        ids.extend(self.output.params());
        for f in &self.flows {
            ids.extend([f.u, f.w, f.b]);
        }
        ids
    }
}

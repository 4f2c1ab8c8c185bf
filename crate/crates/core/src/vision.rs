//! Small ViT patch encoder with low-rank adapters, the image-to-gene head and
//! the auxiliary projection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use seal_autodiff::{Mat, ParamId, ParamKind, ParamStore, Var};

use crate::error::{Result, SealError};
use crate::nn::{normal, uniform, Linear, Mode, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Query,
    Key,
    Value,
    Out,
    MlpIn,
    MlpOut,
}

impl Target {
    pub const ALL: [Target; 6] = [Target::Query, Target::Key, Target::Value, Target::Out, Target::MlpIn, Target::MlpOut];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Query => "query",
            Target::Key => "key",
            Target::Value => "value",
            Target::Out => "out",
            Target::MlpIn => "mlp_in",
            Target::MlpOut => "mlp_out",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = SealError;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| SealError::InvalidArgument(format!("unknown adapter target '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Cls,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVitConfig {
    pub image_size: usize,
    pub patch_px: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub pooling: Pooling,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
}

impl Default for ToyVitConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_px: 16,
            depth: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 2.0,
            pooling: Pooling::Cls,
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
        }
    }
}

impl ToyVitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_px == 0 || self.image_size == 0 || self.image_size % self.patch_px != 0 {
            return Err(SealError::Config(format!(
                "image_size {} must be a positive multiple of patch_px {}",
                self.image_size, self.patch_px
            )));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(SealError::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.depth == 0 || !(self.mlp_ratio > 0.0) {
            return Err(SealError::Config("depth and mlp_ratio must be positive".into()));
        }
        if self.channel_std.iter().any(|s| !(*s > 0.0)) {
            return Err(SealError::Config("channel_std entries must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_px
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    fn mlp_width(&self) -> usize {
        ((self.width as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// Per-channel `(x − mean)/std` on `B × (H·W·3)` interleaved RGB rows.
pub fn normalize_channels(images: &Mat, mean: [f64; 3], std: [f64; 3]) -> Mat {
    let mut out = images.clone();
    for mut row in out.rows_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            let c = k % 3;
            *v = (*v - mean[c]) / std[c];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPlan {
    pub n_finetune_blocks: usize,
    pub targets: Vec<Target>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AdapterPlan {
    fn default() -> Self {
        Self {
            n_finetune_blocks: 3,
            targets: vec![Target::Query, Target::Value],
            rank: 8,
            alpha: 8.0,
            dropout: 0.25,
        }
    }
}

impl AdapterPlan {
    /// Parses target names, rejecting unknown identifiers.
    pub fn with_target_names(mut self, names: &[&str]) -> Result<Self> {
        self.targets = names.iter().map(|n| n.parse()).collect::<Result<_>>()?;
        Ok(self)
    }
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// `r × k`
    pub a: ParamId,
    /// `d_out × r`
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target: Target,
    pub block: usize,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `h = W₀x + (α/r)·B·A·x` for a single vector, with `W₀` stored `[d_out × k]`.
pub fn lora_forward(x: &[f64], w0: &Mat, a: &Mat, b: &Mat, alpha: f64) -> Result<Vec<f64>> {
    let k = x.len();
    let r = a.nrows();
    if w0.ncols() != k || a.ncols() != k || b.ncols() != r || b.nrows() != w0.nrows() || r == 0 {
        return Err(SealError::DimensionMismatch(format!(
            "lora shapes W0 {:?}, A {:?}, B {:?} for input {k}",
            w0.dim(),
            a.dim(),
            b.dim()
        )));
    }
    let xv = ndarray::ArrayView1::from(x);
    let ax = a.dot(&xv);
    let bax = b.dot(&ax);
    let s = alpha / r as f64;
    Ok(w0.dot(&xv).iter().zip(bax.iter()).map(|(h, d)| h + s * d).collect())
}

#[derive(Debug, Clone)]
pub struct VitBlock {
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub maps: BTreeMap<Target, Linear>,
    pub adapters: BTreeMap<Target, LoraAdapter>,
}

impl VitBlock {
    fn map(&self, s: &mut Session, t: Target, x: Var) -> Result<Var> {
        let base = &self.maps[&t];
        let y = base.forward(s, x)?;
        let Some(ad) = self.adapters.get(&t) else {
            return Ok(y);
        };
        let xin = s.dropout(x, ad.dropout);
        let a = s.p(ad.a);
        let b = s.p(ad.b);
        let at = s.graph.transpose(a);
        let bt = s.graph.transpose(b);
        let ax = s.graph.matmul(xin, at);
        let bax = s.graph.matmul(ax, bt);
        let delta = s.graph.scale(bax, ad.scale());
        Ok(s.graph.add(y, delta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterReport {
    pub trainable: usize,
    pub frozen: usize,
    pub wrapped: usize,
}

#[derive(Debug, Clone)]
pub struct ToyVit {
    pub config: ToyVitConfig,
    pub prefix: String,
    pub patch: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<VitBlock>,
    pub ln_final: (ParamId, ParamId),
}

fn layer_norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.gamma"), Array2::ones((1, d)), true),
        store.add(format!("{name}.beta"), Array2::zeros((1, d)), true),
    )
}

impl ToyVit {
    pub fn new(config: ToyVitConfig, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let pdim = config.patch_px * config.patch_px * 3;
        let patch = Linear::new(store, &format!("{prefix}.patch"), pdim, d, true, rng);
        let cls = store.add(format!("{prefix}.cls"), normal(rng, (1, d), 0.02), true);
        let pos = store.add(format!("{prefix}.pos"), normal(rng, (config.n_patches() + 1, d), 0.02), true);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let name = format!("{prefix}.block{i}");
            let ln1 = layer_norm_params(store, &format!("{name}.ln1"), d);
            let ln2 = layer_norm_params(store, &format!("{name}.ln2"), d);
            let mut maps = BTreeMap::new();
            for t in Target::ALL {
                let (k, o) = match t {
                    Target::MlpIn => (d, config.mlp_width()),
                    Target::MlpOut => (config.mlp_width(), d),
                    _ => (d, d),
                };
                maps.insert(t, Linear::new(store, &format!("{name}.{t}"), k, o, true, rng));
            }
            blocks.push(VitBlock {
                ln1,
                ln2,
                maps,
                adapters: BTreeMap::new(),
            });
        }
        let ln_final = layer_norm_params(store, &format!("{prefix}.ln_final"), d);
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            patch,
            cls,
            pos,
            blocks,
            ln_final,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.config.n_patches() + 1
    }

    /// `B × (H·W·3)` → `(B·P) × (p·p·3)`, patches in row-major grid order.
    pub fn patchify(&self, images: &Mat) -> Result<Mat> {
        let c = &self.config;
        if images.ncols() != c.pixels() {
            return Err(SealError::DimensionMismatch(format!(
                "images have {} values per row, expected {}×{}×3 = {}",
                images.ncols(),
                c.image_size,
                c.image_size,
                c.pixels()
            )));
        }
        let (s, p, g) = (c.image_size, c.patch_px, c.grid());
        let np = c.n_patches();
        let mut out = Array2::zeros((images.nrows() * np, p * p * 3));
        for (b, img) in images.rows().into_iter().enumerate() {
            for gy in 0..g {
                for gx in 0..g {
                    let mut row = out.row_mut(b * np + gy * g + gx);
                    let mut k = 0;
                    for y in 0..p {
                        let base = ((gy * p + y) * s + gx * p) * 3;
                        for v in 0..p * 3 {
                            row[k] = img[base + v];
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Embeddings `B × width` for channel-normalized images.
    pub fn forward(&self, s: &mut Session, images: &Mat) -> Result<Var> {
        let c = &self.config;
        let bsz = images.nrows();
        if bsz == 0 {
            return Err(SealError::Empty("no images to encode".into()));
        }
        let (np, t) = (c.n_patches(), self.n_tokens());
        let patches = self.patchify(images)?;
        let pv = s.graph.constant(patches);
        let emb = self.patch.forward(s, pv)?;
        let cls = s.p(self.cls);
        let stacked = s.graph.concat_rows(&[emb, cls]);
        let order: Vec<usize> = (0..bsz)
            .flat_map(|b| (0..t).map(move |k| if k == 0 { bsz * np } else { b * np + k - 1 }))
            .collect();
        let tokens = s.graph.gather_rows(stacked, &order);
        let pos = s.p(self.pos);
        let pos_idx: Vec<usize> = (0..bsz).flat_map(|_| 0..t).collect();
        let pos_tiled = s.graph.gather_rows(pos, &pos_idx);
        let mut x = s.graph.add(tokens, pos_tiled);

        for block in &self.blocks {
            let (g1, b1) = (s.p(block.ln1.0), s.p(block.ln1.1));
            let h = s.graph.layer_norm(x, g1, b1, 1e-6);
            let q = block.map(s, Target::Query, h)?;
            let k = block.map(s, Target::Key, h)?;
            let v = block.map(s, Target::Value, h)?;
            let att = s.graph.attention(q, k, v, bsz, t, c.heads);
            let o = block.map(s, Target::Out, att)?;
            x = s.graph.add(x, o);
            let (g2, b2) = (s.p(block.ln2.0), s.p(block.ln2.1));
            let h = s.graph.layer_norm(x, g2, b2, 1e-6);
            let m = block.map(s, Target::MlpIn, h)?;
            let m = s.graph.gelu(m);
            let m = block.map(s, Target::MlpOut, m)?;
            x = s.graph.add(x, m);
        }
        let (gf, bf) = (s.p(self.ln_final.0), s.p(self.ln_final.1));
        let x = s.graph.layer_norm(x, gf, bf, 1e-6);
        Ok(match c.pooling {
            Pooling::Cls => {
                let idx: Vec<usize> = (0..bsz).map(|b| b * t).collect();
                s.graph.gather_rows(x, &idx)
            }
            Pooling::Mean => {
                let pool = Array2::from_shape_fn((bsz, bsz * t), |(b, j)| if j / t == b { 1.0 / t as f64 } else { 0.0 });
                let pm = s.graph.constant(pool);
                s.graph.matmul(pm, x)
            }
        })
    }

    /// Eval-mode embeddings.
    pub fn encode(&self, store: &ParamStore, images: &Mat) -> Result<Mat> {
        let mut s = Session::new(store, Mode::Eval, 0);
        let z = self.forward(&mut s, images)?;
        Ok(s.graph.value(z).clone())
    }

    /// Every backbone weight (everything except adapters).
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids = self.patch.params();
        ids.extend([self.cls, self.pos, self.ln_final.0, self.ln_final.1]);
        for b in &self.blocks {
            ids.extend([b.ln1.0, b.ln1.1, b.ln2.0, b.ln2.1]);
            for m in b.maps.values() {
                ids.extend(m.params());
            }
        }
        ids
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.blocks.iter().flat_map(|b| b.adapters.values())
    }

    /// Adapter parameter ids with their block index.
    pub fn adapter_blocks(&self) -> Vec<(ParamId, usize)> {
        self.adapters().flat_map(|a| [(a.a, a.block), (a.b, a.block)]).collect()
    }

    /// Freezes the backbone and wraps the planned maps in the top blocks.
    pub fn attach_adapters(&mut self, store: &mut ParamStore, plan: &AdapterPlan, rng: &mut ChaCha8Rng) -> Result<AdapterReport> {
        let depth = self.blocks.len();
        if plan.n_finetune_blocks > depth {
            return Err(SealError::InvalidArgument(format!(
                "cannot finetune {} blocks of a depth-{depth} backbone",
                plan.n_finetune_blocks
            )));
        }
        if plan.rank == 0 || !(plan.alpha > 0.0) || !(0.0..1.0).contains(&plan.dropout) {
            return Err(SealError::InvalidArgument(format!(
                "adapter rank {} / alpha {} / dropout {} invalid",
                plan.rank, plan.alpha, plan.dropout
            )));
        }
        if self.adapters().next().is_some() {
            return Err(SealError::InvalidArgument("adapters already attached".into()));
        }
        for id in self.backbone_ids() {
            store.set_trainable(id, false);
        }
        let mut wrapped = 0;
        for bi in depth - plan.n_finetune_blocks..depth {
            for &t in &plan.targets {
                let base = self.blocks[bi].maps[&t].clone();
                let name = format!("{}.block{bi}.{t}", self.prefix);
                let bound = 1.0 / (base.in_dim as f64).sqrt();
                let a = store.add(format!("{name}.lora_a"), uniform(rng, (plan.rank, base.in_dim), bound), true);
                let b = store.zeros(format!("{name}.lora_b"), (base.out_dim, plan.rank), true);
                self.blocks[bi].adapters.insert(
                    t,
                    LoraAdapter {
                        a,
                        b,
                        rank: plan.rank,
                        alpha: plan.alpha,
                        dropout: plan.dropout,
                        target: t,
                        block: bi,
                    },
                );
                wrapped += 1;
            }
        }
        Ok(self.report(store, wrapped))
    }

    fn report(&self, store: &ParamStore, wrapped: usize) -> AdapterReport {
        let mut trainable = 0;
        let mut frozen = 0;
        let ids: Vec<ParamId> = self
            .backbone_ids()
            .into_iter()
            .chain(self.adapters().flat_map(|a| [a.a, a.b]))
            .collect();
        for id in ids {
            let p = store.get(id);
            if p.kind == ParamKind::Buffer {
                continue;
            }
            if p.trainable {
                trainable += p.value.len();
            } else {
                frozen += p.value.len();
            }
        }
        AdapterReport {
            trainable,
            frozen,
            wrapped,
        }
    }
}

/// Image-to-gene regression head `d → G`, optionally with one hidden ReLU layer.
#[derive(Debug, Clone)]
pub struct GeneDecoder {
    pub layers: Vec<Linear>,
}

impl GeneDecoder {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, g: usize, hidden: Option<usize>, rng: &mut ChaCha8Rng) -> Self {
        let layers = match hidden {
            Some(h) => vec![
                Linear::new(store, &format!("{prefix}.hidden"), d, h, true, rng),
                Linear::new(store, &format!("{prefix}.out"), h, g, true, rng),
            ],
            None => vec![Linear::new(store, &format!("{prefix}.out"), d, g, true, rng)],
        };
        Self { layers }
    }

    pub fn forward(&self, s: &mut Session, z: Var) -> Result<Var> {
        let mut h = z;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = s.graph.relu(h);
            }
            h = l.forward(s, h)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    None,
    Linear,
}

/// Optional learned map applied before the contrastive loss; identity-initialized.
#[derive(Debug, Clone)]
pub struct AuxProjection {
    pub mode: ProjectionMode,
    pub linear: Option<Linear>,
}

impl AuxProjection {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, mode: ProjectionMode) -> Self {
        let linear = match mode {
            ProjectionMode::None => None,
            ProjectionMode::Linear => {
                let w = store.add(format!("{prefix}.weight"), Array2::eye(d), true);
                let b = store.zeros(format!("{prefix}.bias"), (1, d), true);
                Some(Linear::from_parts(w, Some(b), d, d))
            }
        };
        Self { mode, linear }
    }

    pub fn forward(&self, s: &mut Session, z: Var) -> Result<Var> {
        match &self.linear {
            None => Ok(z),
            Some(l) => l.forward(s, z),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.linear.iter().flat_map(Linear::params).collect()
    }
}

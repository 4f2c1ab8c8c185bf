//! Stage I omics warmup and Stage II joint alignment.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::blob::write_atomic;
use crate::error::{Result, SealError};
use crate::nn::{apply_buffer_updates, normal, Mode, Session};
use crate::objectives::{domain_loss, info_nce_graph, reconstruction_loss_graph, stage2_loss_graph, DomainHead, LossWeights, Stage2Parts};
use crate::omics::{OmicsVae, VaeConfig};
use crate::vision::{normalize_channels, AdapterPlan, AuxProjection, GeneDecoder, ProjectionMode, ToyVit, ToyVitConfig};
use seal_autodiff::{clip_grad_norm, AdamW, Mat, ParamId, ParamStore, StepGroup, Var};

pub const OMICS_PREFIX: &str = "omics";
pub const VISION_PREFIX: &str = "vision";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub stage2_epochs: usize,
    pub lr_stage1: f64,
    pub lr_image: f64,
    pub lr_omics: f64,
    pub weight_decay: f64,
    pub layer_decay: f64,
    pub clip_norm: f64,
    pub loss: LossWeights,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 384,
            warmup_epochs: 3,
            stage2_epochs: 10,
            lr_stage1: 5e-4,
            lr_image: 1e-4,
            lr_omics: 1e-4,
            weight_decay: 0.2,
            layer_decay: 0.7,
            clip_norm: 5.0,
            loss: LossWeights::default(),
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_stage1", self.lr_stage1), ("lr_image", self.lr_image), ("lr_omics", self.lr_omics)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(SealError::Config(format!("{name} = {lr} must be positive")));
            }
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(SealError::Config(format!("layer_decay = {} must be in (0, 1]", self.layer_decay)));
        }
        if self.batch_size < 2 {
            return Err(SealError::Config(format!("batch_size = {} must be at least 2", self.batch_size)));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(SealError::Config("weight_decay must be ≥ 0 and clip_norm > 0".into()));
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

/// `lr0 · ½(1 + cos(π · step / total))`.
pub fn cosine_anneal(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

/// Architecture of everything a checkpoint holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub genes: Vec<String>,
    pub vae: VaeConfig,
    pub vision: Option<VisionConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    pub vit: ToyVitConfig,
    pub plan: AdapterPlan,
    /// Seeds the frozen backbone weights.
    pub backbone_seed: u64,
    pub projection: ProjectionMode,
    pub decoder_hidden: Option<usize>,
    pub n_domains: usize,
    pub grl_lambda: f64,
}

#[derive(Debug, Clone)]
pub struct VisionSide {
    pub vit: ToyVit,
    pub img_proj: AuxProjection,
    pub gene_proj: AuxProjection,
    pub decoder: GeneDecoder,
    pub domain: DomainHead,
}

#[derive(Debug, Clone)]
pub struct SealModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vae: OmicsVae,
    pub vision: Option<VisionSide>,
}

/// The backbone as distributed, before any adapter is attached.
pub fn frozen_backbone(vit: &ToyVitConfig, backbone_seed: u64) -> Result<(ParamStore, ToyVit)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(backbone_seed);
    let model = ToyVit::new(vit.clone(), &mut store, VISION_PREFIX, &mut rng)?;
    Ok((store, model))
}

/// Eval-mode embeddings of raw `[0, 1]` images, in chunks.
pub fn encode_images(vit: &ToyVit, store: &ParamStore, images: &Mat) -> Result<Mat> {
    let c = &vit.config;
    let norm = normalize_channels(images, c.channel_mean, c.channel_std);
    let mut parts = Vec::new();
    for start in (0..norm.nrows()).step_by(256) {
        let end = (start + 256).min(norm.nrows());
        parts.push(vit.encode(store, &norm.slice(ndarray::s![start..end, ..]).to_owned())?);
    }
    if parts.is_empty() {
        return Err(SealError::Empty("no images to encode".into()));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
}

impl SealModel {
    /// Omics VAE only, as trained in Stage I.
    pub fn omics(genes: Vec<String>, vae: VaeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if genes.len() != vae.input_dim {
            return Err(SealError::Config(format!(
                "vae input_dim {} does not match the {}-gene panel",
                vae.input_dim,
                genes.len()
            )));
        }
        let mut store = ParamStore::new();
        let model = OmicsVae::new(vae.clone(), &mut store, OMICS_PREFIX, rng)?;
        Ok(Self {
            config: ModelConfig {
                genes,
                vae,
                vision: None,
            },
            store,
            vae: model,
            vision: None,
        })
    }

    /// Adds the frozen backbone, its adapters and the alignment heads.
    pub fn attach_vision(&mut self, cfg: VisionConfig, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.vision.is_some() {
            return Err(SealError::InvalidArgument("vision side already attached".into()));
        }
        let d = cfg.vit.width;
        if d != self.config.vae.latent_dim {
            return Err(SealError::Config(format!(
                "image embedding width {d} must equal the omics latent_dim {}",
                self.config.vae.latent_dim
            )));
        }
        let mut brng = ChaCha8Rng::seed_from_u64(cfg.backbone_seed);
        let mut vit = ToyVit::new(cfg.vit.clone(), &mut self.store, VISION_PREFIX, &mut brng)?;
        vit.attach_adapters(&mut self.store, &cfg.plan, rng)?;
        let img_proj = AuxProjection::new(&mut self.store, "head.img_proj", d, cfg.projection);
        let gene_proj = AuxProjection::new(&mut self.store, "head.gene_proj", d, cfg.projection);
        let g = self.config.genes.len();
        let decoder = GeneDecoder::new(&mut self.store, "head.img_decoder", d, g, cfg.decoder_hidden, rng);
        let domain = DomainHead::new(&mut self.store, "head.domain", d, cfg.n_domains.max(1), cfg.grl_lambda, rng)?;
        self.vision = Some(VisionSide {
            vit,
            img_proj,
            gene_proj,
            decoder,
            domain,
        });
        self.config.vision = Some(cfg);
        Ok(())
    }

    /// Rebuilds the parameter layout described by `config`; values are placeholders.
    pub fn skeleton(config: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::omics(config.genes.clone(), config.vae.clone(), &mut rng)?;
        if let Some(v) = &config.vision {
            m.attach_vision(v.clone(), &mut rng)?;
        }
        Ok(m)
    }

    pub fn vision(&self) -> Result<&VisionSide> {
        self.vision
            .as_ref()
            .ok_or_else(|| SealError::Stage("checkpoint has no vision encoder (Stage I only)".into()))
    }

    pub fn embed_omics(&self, expr: &Mat) -> Result<Mat> {
        self.vae.embed(&self.store, expr)
    }

    pub fn embed_images(&self, images: &Mat) -> Result<Mat> {
        encode_images(&self.vision()?.vit, &self.store, images)
    }

    /// Ids of the frozen backbone weights.
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.vision.as_ref().map(|v| v.vit.backbone_ids()).unwrap_or_default()
    }
}

/// One training-log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub infonce: f64,
    pub rec_img: f64,
    pub rec_gene: f64,
    pub da: f64,
    pub lr: f64,
}

pub fn log_to_tsv(rows: &[LogRow]) -> String {
    let mut s = String::from("epoch\tstep\tloss_total\tloss_infonce\tloss_rec_img\tloss_rec_gene\tloss_da\tlr\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch, r.step, r.total, r.infonce, r.rec_img, r.rec_gene, r.da, r.lr
        );
    }
    s
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    write_atomic(path, log_to_tsv(rows).as_bytes())
}

/// Mean of `total` per epoch, in epoch order.
pub fn epoch_means(rows: &[LogRow], pick: impl Fn(&LogRow) -> f64) -> Vec<f64> {
    let n = rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    let mut sum = vec![0.0; n];
    let mut cnt = vec![0usize; n];
    for r in rows {
        sum[r.epoch] += pick(r);
        cnt[r.epoch] += 1;
    }
    sum.iter().zip(&cnt).map(|(s, c)| s / (*c).max(1) as f64).collect()
}

/// Shuffled minibatches; a trailing batch of one row is dropped since the
/// batch statistics need at least two.
fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

fn non_finite(stage: &str, epoch: usize, step: usize, parts: &[(&str, f64)]) -> SealError {
    let detail: Vec<String> = parts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    SealError::Numerical(format!("{stage}: non-finite loss at epoch {epoch}, step {step} ({})", detail.join(", ")))
}

struct StepOutput {
    grads: Vec<(ParamId, Mat)>,
    buffers: Vec<(ParamId, Mat)>,
}

fn finish(s: Session, loss: Var) -> StepOutput {
    let grads = s.graph.backward(loss).param_grads(&s.graph);
    StepOutput {
        grads,
        buffers: s.buffer_updates,
    }
}

/// Stage I: `L_rec + β·regularizer` with Adam and a cosine-annealed rate.
pub fn train_stage1(model: &mut SealModel, expr: &Mat, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if expr.nrows() < 2 {
        return Err(SealError::Empty(format!("Stage I needs at least 2 spots, got {}", expr.nrows())));
    }
    if expr.ncols() != model.config.vae.input_dim {
        return Err(SealError::DimensionMismatch(format!(
            "expression has {} genes, the model expects {}",
            expr.ncols(),
            model.config.vae.input_dim
        )));
    }
    let per_epoch = expr.nrows().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.warmup_epochs;
    let beta = model.config.vae.beta_kl;
    let d = model.config.vae.latent_dim;
    let mut opt = AdamW::default();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.warmup_epochs {
        for idx in batches(expr.nrows(), cfg.batch_size, rng) {
            let lr = cosine_anneal(step, total_steps, cfg.lr_stage1);
            let x = expr.select(Axis(0), &idx);
            let eps = normal(rng, (idx.len(), d), 1.0);
            let mut s = Session::new(&model.store, Mode::Train, rng.next_u64());
            let xv = s.graph.constant(x);
            let out = model.vae.forward(&mut s, xv, &eps)?;
            let rec = reconstruction_loss_graph(&mut s.graph, xv, out.recon, &cfg.loss)?;
            let reg = s.graph.scale(out.regularizer, beta);
            let loss = s.graph.add(rec, reg);
            let value = s.graph.scalar(loss);
            let rec_value = s.graph.scalar(rec);
            if !value.is_finite() {
                return Err(non_finite(
                    "stage1",
                    epoch,
                    step,
                    &[("rec", s.graph.scalar(rec)), ("regularizer", s.graph.scalar(out.regularizer))],
                ));
            }
            let o = finish(s, loss);
            opt.step(&mut model.store, &o.grads, |_| StepGroup { lr, weight_decay: 0.0 });
            apply_buffer_updates(&mut model.store, o.buffers);
            log.push(LogRow {
                epoch,
                step,
                total: value,
                infonce: 0.0,
                rec_img: 0.0,
                rec_gene: rec_value,
                da: 0.0,
                lr,
            });
            step += 1;
        }
        log::info!("stage1 epoch {epoch}: mean loss {:.5}", epoch_means(&log, |r| r.total)[epoch]);
    }
    Ok(log)
}

/// Paired Stage II inputs with matched row indices.
#[derive(Debug, Clone)]
pub struct PairedData<'a> {
    /// Raw `[0, 1]` images, `N × (S·S·3)`.
    pub images: &'a Mat,
    pub expr: &'a Mat,
    pub domains: &'a [usize],
}

impl PairedData<'_> {
    fn check(&self) -> Result<usize> {
        let n = self.images.nrows();
        if self.expr.nrows() != n || self.domains.len() != n {
            return Err(SealError::DimensionMismatch(format!(
                "modality batch mismatch: {n} images, {} expression rows, {} domain labels",
                self.expr.nrows(),
                self.domains.len()
            )));
        }
        if n < 2 {
            return Err(SealError::Empty(format!("Stage II needs at least 2 pairs, got {n}")));
        }
        Ok(n)
    }
}

/// Base Stage II learning rate of every parameter, indexed like the store.
pub fn stage2_learning_rates(model: &SealModel, cfg: &TrainConfig) -> Result<Vec<(ParamId, f64)>> {
    let v = model.vision()?;
    let top = v.vit.blocks.len().saturating_sub(1);
    let mut lr = vec![cfg.lr_image; model.store.len()];
    for (id, block) in v.vit.adapter_blocks() {
        lr[id.index()] = cfg.lr_image * cfg.layer_decay.powi((top - block) as i32);
    }
    Ok(model
        .store
        .iter()
        .map(|(id, p)| (id, if p.name.starts_with(OMICS_PREFIX) { cfg.lr_omics } else { lr[id.index()] }))
        .collect())
}

/// Stage II: InfoNCE + image-to-gene reconstruction + continued omics
/// reconstruction + domain adversary, with AdamW, layer decay on adapter
/// rates, cosine annealing and gradient clipping.
pub fn train_stage2(model: &mut SealModel, data: &PairedData, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let n = data.check()?;
    let vis = model.vision()?.clone();
    let size = vis.vit.config.image_size;
    if data.images.ncols() != vis.vit.config.pixels() {
        return Err(SealError::DimensionMismatch(format!(
            "images have {} values, the backbone expects {}",
            data.images.ncols(),
            vis.vit.config.pixels()
        )));
    }
    let groups = stage2_learning_rates(model, cfg)?;
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.stage2_epochs;
    let beta = model.config.vae.beta_kl;
    let d = model.config.vae.latent_dim;
    let (mean, std) = (vis.vit.config.channel_mean, vis.vit.config.channel_std);
    let mut opt = AdamW::default();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.stage2_epochs {
        for idx in batches(n, cfg.batch_size, rng) {
            let factor = cosine_anneal(step, total_steps, 1.0);
            let mut imgs = Array2::zeros((idx.len(), data.images.ncols()));
            for (r, &i) in idx.iter().enumerate() {
                let a = augment(data.images.row(i).as_slice().expect("row-major"), size, &cfg.augment, rng);
                imgs.row_mut(r).assign(&ndarray::ArrayView1::from(&a));
            }
            let imgs = normalize_channels(&imgs, mean, std);
            let x = data.expr.select(Axis(0), &idx);
            let dom: Vec<usize> = idx.iter().map(|&i| data.domains[i]).collect();
            let eps = normal(rng, (idx.len(), d), 1.0);

            let mut s = Session::new(&model.store, Mode::Train, rng.next_u64());
            let zi = vis.vit.forward(&mut s, &imgs)?;
            let zi = vis.img_proj.forward(&mut s, zi)?;
            let xv = s.graph.constant(x);
            let out = model.vae.forward(&mut s, xv, &eps)?;
            let zg = vis.gene_proj.forward(&mut s, out.z_k)?;
            let info = info_nce_graph(&mut s.graph, zi, zg, cfg.loss.tau)?;
            let pred = vis.decoder.forward(&mut s, zi)?;
            let rec_img = reconstruction_loss_graph(&mut s.graph, xv, pred, &cfg.loss)?;
            let rec = reconstruction_loss_graph(&mut s.graph, xv, out.recon, &cfg.loss)?;
            let reg = s.graph.scale(out.regularizer, beta);
            let rec_gene = s.graph.add(rec, reg);
            let da = domain_loss(&mut s, &vis.domain, zi, zg, &dom)?;
            let parts = Stage2Parts {
                info_nce: info,
                rec_img,
                rec_gene,
                da,
            };
            let (loss, terms) = stage2_loss_graph(&mut s.graph, &parts, &cfg.loss);
            let value = s.graph.scalar(loss);
            if !value.is_finite() {
                let detail: Vec<(&str, f64)> = terms.iter().map(|(k, v)| (k.as_str(), *v)).collect();
                return Err(non_finite("stage2", epoch, step, &detail));
            }
            let mut o = finish(s, loss);
            clip_grad_norm(&mut o.grads, cfg.clip_norm);
            opt.step(&mut model.store, &o.grads, |id| StepGroup {
                lr: groups[id.index()].1 * factor,
                weight_decay: cfg.weight_decay,
            });
            apply_buffer_updates(&mut model.store, o.buffers);
            log.push(LogRow {
                epoch,
                step,
                total: value,
                infonce: terms["infonce"],
                rec_img: terms["rec_img"],
                rec_gene: terms["rec_gene"],
                da: terms["da"],
                lr: cfg.lr_image * factor,
            });
            step += 1;
        }
        let m = epoch_means(&log, |r| r.infonce);
        log::info!("stage2 epoch {epoch}: mean infonce {:.5}", m[epoch]);
    }
    Ok(log)
}

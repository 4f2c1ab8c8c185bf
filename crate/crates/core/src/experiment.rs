//! Synthetic end-to-end run: generate, preprocess, Stage I, Stage II, then
//! probe frozen and finetuned image embeddings on held-out patients.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{pool, preprocess, PreprocessConfig};
use crate::error::{Result, SealError};
use crate::eval::{kfold_probe, ProbeConfig};
use crate::expr::Split;
use crate::omics::VaeConfig;
use crate::synth::{gen_synthetic, SynthSpec};
use crate::train::{encode_images, frozen_backbone, train_stage1, train_stage2, LogRow, PairedData, SealModel, TrainConfig, VisionConfig};
use crate::vision::{AdapterPlan, ProjectionMode, ToyVitConfig};

/// Defaults are the desk-scale run: smaller batches, higher rates and more
/// Stage II epochs than the large-cohort recipe, on a 16 px backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    pub preprocess: PreprocessConfig,
    pub vae_hidden: usize,
    pub vit: ToyVitConfig,
    pub plan: AdapterPlan,
    pub backbone_seed: u64,
    pub train: TrainConfig,
    pub probe_components: usize,
    pub probe_alpha: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let vit = ToyVitConfig {
            image_size: 16,
            patch_px: 4,
            depth: 4,
            width: 32,
            heads: 4,
            ..ToyVitConfig::default()
        };
        Self {
            synth: SynthSpec::default(),
            preprocess: PreprocessConfig::default(),
            vae_hidden: 256,
            vit,
            plan: AdapterPlan::default(),
            backbone_seed: 7,
            train: TrainConfig {
                batch_size: 128,
                stage2_epochs: 60,
                lr_image: 3e-3,
                lr_omics: 1e-3,
                ..TrainConfig::default()
            },
            probe_components: 256,
            probe_alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub frozen_pcc: f64,
    pub finetuned_pcc: f64,
    pub n_train: usize,
    pub n_heldout: usize,
    pub stage1: Vec<LogRow>,
    pub stage2: Vec<LogRow>,
    pub seconds: f64,
}

impl ExperimentResult {
    pub fn gain(&self) -> f64 {
        self.finetuned_pcc - self.frozen_pcc
    }
}

/// One run with training seed `seed`; `workdir` receives the raw synthetic data.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, workdir: &Path) -> Result<ExperimentResult> {
    let t0 = Instant::now();
    if cfg.vit.image_size != cfg.synth.image_size {
        return Err(SealError::Config(format!(
            "backbone image_size {} differs from synthetic image_size {}",
            cfg.vit.image_size, cfg.synth.image_size
        )));
    }
    gen_synthetic(&cfg.synth, workdir, true)?;
    let data = preprocess(workdir, &cfg.preprocess)?;
    let train_set = pool(&data.in_split(Split::Train))?;
    let mut held: Vec<_> = data.in_split(Split::Val);
    held.extend(data.in_split(Split::Test));
    let held = pool(&held)?;
    let (train_images, held_images) = match (&train_set.images, &held.images) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(SealError::MissingFile(workdir.join("images.bin"))),
    };

    let d = cfg.vit.width;
    let genes = data.panel.genes.clone();
    let mut vae = VaeConfig::new(genes.len(), d);
    vae.hidden_dims = vec![cfg.vae_hidden, d];
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SealModel::omics(genes.clone(), vae, &mut rng)?;
    let stage1 = train_stage1(&mut model, &train_set.expr, &tc, &mut rng)?;
    model.attach_vision(
        VisionConfig {
            vit: cfg.vit.clone(),
            plan: cfg.plan.clone(),
            backbone_seed: cfg.backbone_seed,
            projection: ProjectionMode::Linear,
            decoder_hidden: None,
            n_domains: data.n_domains(),
            grl_lambda: 1.0,
        },
        &mut rng,
    )?;
    let paired = PairedData {
        images: train_images,
        expr: &train_set.expr,
        domains: &train_set.domains,
    };
    let stage2 = train_stage2(&mut model, &paired, &tc, &mut rng)?;

    let probe = ProbeConfig {
        k: 5,
        n_components: cfg.probe_components,
        alpha: cfg.probe_alpha,
        seed,
    };
    let (fstore, fvit) = frozen_backbone(&cfg.vit, cfg.backbone_seed)?;
    let frozen = encode_images(&fvit, &fstore, held_images)?;
    let tuned = model.embed_images(held_images)?;
    let frozen_pcc = kfold_probe(&frozen, &held.expr, &genes, &probe)?.mean_pcc();
    let finetuned_pcc = kfold_probe(&tuned, &held.expr, &genes, &probe)?.mean_pcc();
    Ok(ExperimentResult {
        frozen_pcc,
        finetuned_pcc,
        n_train: train_set.expr.nrows(),
        n_heldout: held.expr.nrows(),
        stage1,
        stage2,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use seal_core::blob::{write_atomic, EmbeddingBlob};
use seal_core::checkpoint::{hex, load_checkpoint, read_manifest, save_checkpoint, Checkpoint, StageTag};
use seal_core::dataset::{pool, preprocess, Dataset, Pooled, PreprocessConfig, ProcessedSample};
use seal_core::eval::{g2i_build_query, g2i_similarity_map, i2g_retrieve, kfold_probe, metric_pcc, write_similarity_png, write_similarity_tsv, ProbeConfig, WeightMode};
use seal_core::expr::Split;
use seal_core::omics::VaeConfig;
use seal_core::synth::{gen_synthetic, SynthSpec};
use seal_core::train::{encode_images, frozen_backbone, train_stage1, train_stage2, write_log, PairedData, SealModel, TrainConfig, VisionConfig};
use seal_core::vision::{AdapterPlan, Pooling, ProjectionMode, ToyVitConfig};
use seal_core::{Result, SealError};

use crate::config::{require, resolve, Flat};

pub const DATA_DIR_ENV: &str = "SEAL_DATA_DIR";
pub const LOG_FILE: &str = "train_log.tsv";

fn data_root(sub: &str) -> Option<String> {
    std::env::var(DATA_DIR_ENV).ok().map(|d| Path::new(&d).join(sub).display().to_string())
}

fn load_dataset(dir: &str) -> Result<Dataset> {
    Dataset::read(Path::new(dir))
}

/// `all`, `train`, `val`, `test`, or `heldout` (val + test).
fn pick<'a>(data: &'a Dataset, split: &str) -> Result<Vec<&'a ProcessedSample>> {
    let picked: Vec<_> = match split {
        "all" => data.samples.iter().collect(),
        "train" => data.in_split(Split::Train),
        "val" => data.in_split(Split::Val),
        "test" => data.in_split(Split::Test),
        "heldout" => {
            let mut v = data.in_split(Split::Val);
            v.extend(data.in_split(Split::Test));
            v
        }
        other => {
            return Err(SealError::Config(format!(
                "split `{other}` is not one of all, train, val, test, heldout"
            )))
        }
    };
    if picked.is_empty() {
        return Err(SealError::Empty(format!("split `{split}` has no samples")));
    }
    Ok(picked)
}

fn select(data: &Dataset, split: &str) -> Result<Pooled> {
    pool(&pick(data, split)?)
}

fn images_of(p: &Pooled, split: &str) -> Result<ndarray::Array2<f64>> {
    p.images
        .clone()
        .ok_or_else(|| SealError::Empty(format!("split `{split}` has samples without images")))
}

// ---- gen-synth ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSynthSettings {
    pub out_dir: Option<String>,
    pub spec: SynthSpec,
}

pub fn gen_synth(flat: &Flat, force: bool) -> Result<String> {
    let s = resolve(
        &GenSynthSettings {
            out_dir: data_root("raw"),
            spec: SynthSpec::default(),
        },
        flat,
    )?;
    let out = require(&s.out_dir, "out_dir", "--out")?;
    let data = gen_synthetic(&s.spec, Path::new(&out), force)?;
    Ok(format!(
        "wrote {} samples × {} spots × {} genes to {out}",
        data.samples.len(),
        s.spec.spots_per_sample,
        s.spec.n_genes
    ))
}

// ---- preprocess ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSettings {
    pub raw_dir: Option<String>,
    pub out_dir: Option<String>,
    pub preprocess: PreprocessConfig,
}

pub fn run_preprocess(flat: &Flat) -> Result<String> {
    let s = resolve(
        &PreprocessSettings {
            raw_dir: data_root("raw"),
            out_dir: data_root("processed"),
            preprocess: PreprocessConfig::default(),
        },
        flat,
    )?;
    let raw = require(&s.raw_dir, "raw_dir", "--raw")?;
    let out = require(&s.out_dir, "out_dir", "--out")?;
    let data = preprocess(Path::new(&raw), &s.preprocess)?;
    data.write(Path::new(&out), &s.preprocess)?;
    let counts: Vec<String> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&sp| format!("{} {}", sp.as_str(), data.split.count(sp)))
        .collect();
    Ok(format!(
        "{} samples, {} panel genes, patients: {}; wrote {out}",
        data.samples.len(),
        data.panel.len(),
        counts.join(", ")
    ))
}

// ---- train-omics ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeSettings {
    pub hidden_width: usize,
    pub latent_dim: usize,
    pub n_flows: usize,
    pub encoder_dropout: f64,
    pub decoder_dropout: f64,
    pub beta_kl: f64,
}

impl Default for VaeSettings {
    fn default() -> Self {
        let v = VaeConfig::new(1, 32);
        Self {
            hidden_width: v.hidden_dims[0],
            latent_dim: v.latent_dim,
            n_flows: v.n_flows,
            encoder_dropout: v.encoder_dropout,
            decoder_dropout: v.decoder_dropout,
            beta_kl: v.beta_kl,
        }
    }
}

impl VaeSettings {
    fn build(&self, genes: usize) -> VaeConfig {
        VaeConfig {
            input_dim: genes,
            hidden_dims: vec![self.hidden_width, self.latent_dim],
            latent_dim: self.latent_dim,
            n_flows: self.n_flows,
            encoder_dropout: self.encoder_dropout,
            decoder_dropout: self.decoder_dropout,
            beta_kl: self.beta_kl,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOmicsSettings {
    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
    pub vae: VaeSettings,
    pub train: TrainConfig,
}

pub fn train_omics(flat: &Flat) -> Result<String> {
    let s = resolve(
        &TrainOmicsSettings {
            data_dir: data_root("processed"),
            out_dir: None,
            vae: VaeSettings::default(),
            train: TrainConfig::default(),
        },
        flat,
    )?;
    let data_dir = require(&s.data_dir, "data_dir", "--data")?;
    let out = require(&s.out_dir, "out_dir", "--out")?;
    let data = load_dataset(&data_dir)?;
    let train = select(&data, "train")?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.train.seed);
    let mut model = SealModel::omics(data.panel.genes.clone(), s.vae.build(data.panel.len()), &mut rng)?;
    let log = train_stage1(&mut model, &train.expr, &s.train, &mut rng)?;
    let out = PathBuf::from(out);
    let ck = Checkpoint {
        stage: StageTag::Omics,
        step: log.len(),
        model,
        train: s.train,
        rng,
    };
    save_checkpoint(&ck, &out)?;
    write_log(&out.join(LOG_FILE), &log)?;
    let last = log.last().map_or(f64::NAN, |r| r.total);
    Ok(format!("{} steps on {} spots, final loss {last:.6}; checkpoint {}", log.len(), train.expr.nrows(), out.display()))
}

// ---- train-align ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionSettings {
    pub patch_px: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub pooling: Pooling,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    pub backbone_seed: u64,
    pub projection: ProjectionMode,
    pub decoder_hidden: Option<usize>,
    pub grl_lambda: f64,
}

impl Default for VisionSettings {
    fn default() -> Self {
        let v = ToyVitConfig::default();
        Self {
            patch_px: 4,
            depth: v.depth,
            heads: v.heads,
            mlp_ratio: v.mlp_ratio,
            pooling: v.pooling,
            channel_mean: v.channel_mean,
            channel_std: v.channel_std,
            backbone_seed: 0,
            projection: ProjectionMode::Linear,
            decoder_hidden: None,
            grl_lambda: 1.0,
        }
    }
}

impl VisionSettings {
    pub fn vit(&self, image_size: usize, width: usize) -> ToyVitConfig {
        ToyVitConfig {
            image_size,
            patch_px: self.patch_px,
            depth: self.depth,
            width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            pooling: self.pooling,
            channel_mean: self.channel_mean,
            channel_std: self.channel_std,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainAlignSettings {
    pub data_dir: Option<String>,
    pub checkpoint: Option<String>,
    pub out_dir: Option<String>,
    pub vision: VisionSettings,
    pub plan: AdapterPlan,
    pub train: TrainConfig,
}

fn side_of(pixels: usize) -> Result<usize> {
    let side = ((pixels / 3) as f64).sqrt().round() as usize;
    if side * side * 3 != pixels {
        return Err(SealError::Malformed(format!("image rows of {pixels} values are not square RGB patches")));
    }
    Ok(side)
}

pub fn train_align(flat: &Flat) -> Result<String> {
    let s = resolve(
        &TrainAlignSettings {
            data_dir: data_root("processed"),
            checkpoint: None,
            out_dir: None,
            vision: VisionSettings::default(),
            plan: AdapterPlan::default(),
            train: TrainConfig::default(),
        },
        flat,
    )?;
    let data_dir = require(&s.data_dir, "data_dir", "--data")?;
    let ck_dir = require(&s.checkpoint, "checkpoint", "--ckpt")?;
    let out = require(&s.out_dir, "out_dir", "--out")?;
    let data = load_dataset(&data_dir)?;
    let ck = load_checkpoint(Path::new(&ck_dir))?;
    if ck.stage != StageTag::Omics {
        return Err(SealError::Stage(format!("{ck_dir} is already aligned; train-align starts from a train-omics checkpoint")));
    }
    if ck.model.config.genes != data.panel.genes {
        return Err(SealError::DimensionMismatch("checkpoint gene panel differs from the dataset panel".into()));
    }
    let train = select(&data, "train")?;
    let images = images_of(&train, "train")?;
    let size = side_of(images.ncols())?;
    let mut model = ck.model;
    let mut rng = ChaCha8Rng::seed_from_u64(s.train.seed);
    let vision = VisionConfig {
        vit: s.vision.vit(size, model.config.vae.latent_dim),
        plan: s.plan.clone(),
        backbone_seed: s.vision.backbone_seed,
        projection: s.vision.projection,
        decoder_hidden: s.vision.decoder_hidden,
        n_domains: data.n_domains(),
        grl_lambda: s.vision.grl_lambda,
    };
    model.attach_vision(vision, &mut rng)?;
    let paired = PairedData {
        images: &images,
        expr: &train.expr,
        domains: &train.domains,
    };
    let log = train_stage2(&mut model, &paired, &s.train, &mut rng)?;
    let out = PathBuf::from(out);
    let ck = Checkpoint {
        stage: StageTag::Aligned,
        step: log.len(),
        model,
        train: s.train,
        rng,
    };
    save_checkpoint(&ck, &out)?;
    write_log(&out.join(LOG_FILE), &log)?;
    let last = log.last().map_or(f64::NAN, |r| r.infonce);
    Ok(format!("{} steps on {} pairs, final InfoNCE {last:.6}; checkpoint {}", log.len(), images.nrows(), out.display()))
}

// ---- embed ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedSettings {
    pub data_dir: Option<String>,
    pub checkpoint: Option<String>,
    pub out: Option<String>,
    /// `image`, `frozen_image` or `omics`.
    pub modality: String,
    pub split: String,
}

pub fn embed(flat: &Flat) -> Result<String> {
    let s = resolve(
        &EmbedSettings {
            data_dir: data_root("processed"),
            checkpoint: None,
            out: None,
            modality: "image".into(),
            split: "all".into(),
        },
        flat,
    )?;
    let data_dir = require(&s.data_dir, "data_dir", "--data")?;
    let ck_dir = require(&s.checkpoint, "checkpoint", "--ckpt")?;
    let out = require(&s.out, "out", "--out")?;
    let data = load_dataset(&data_dir)?;
    let rows = select(&data, &s.split)?;
    let ck = load_checkpoint(Path::new(&ck_dir))?;
    let emb = match s.modality.as_str() {
        "omics" => ck.model.embed_omics(&rows.expr)?,
        "image" => ck.model.embed_images(&images_of(&rows, &s.split)?)?,
        "frozen_image" => {
            let v = ck.model.config.vision.as_ref().ok_or_else(|| SealError::Stage("checkpoint has no vision encoder".into()))?;
            let (store, vit) = frozen_backbone(&v.vit, v.backbone_seed)?;
            encode_images(&vit, &store, &images_of(&rows, &s.split)?)?
        }
        other => return Err(SealError::Config(format!("modality `{other}` is not one of image, frozen_image, omics"))),
    };
    let blob = EmbeddingBlob::from_matrix(&emb);
    blob.write(Path::new(&out))?;
    Ok(format!("{} × {} {} embeddings → {out} (digest {})", blob.rows, blob.cols, s.modality, hex(blob.digest())))
}

// ---- probe ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    pub data_dir: Option<String>,
    pub embeddings: Option<String>,
    pub out: Option<String>,
    pub split: String,
    pub k: usize,
    pub n_components: usize,
    pub alpha: f64,
    pub seed: u64,
}

pub fn probe(flat: &Flat) -> Result<String> {
    let d = ProbeConfig::default();
    let s = resolve(
        &ProbeSettings {
            data_dir: data_root("processed"),
            embeddings: None,
            out: None,
            split: "all".into(),
            k: d.k,
            n_components: d.n_components,
            alpha: d.alpha,
            seed: d.seed,
        },
        flat,
    )?;
    let data_dir = require(&s.data_dir, "data_dir", "--data")?;
    let emb_path = require(&s.embeddings, "embeddings", "--embeddings")?;
    let data = load_dataset(&data_dir)?;
    let rows = select(&data, &s.split)?;
    let emb = EmbeddingBlob::read(Path::new(&emb_path))?.to_matrix();
    let cfg = ProbeConfig {
        k: s.k,
        n_components: s.n_components,
        alpha: s.alpha,
        seed: s.seed,
    };
    let r = kfold_probe(&emb, &rows.expr, &data.panel.genes, &cfg)?;
    if let Some(out) = &s.out {
        r.write_tsv(Path::new(out))?;
    }
    Ok(format!(
        "{}-fold probe on {} spots: mean PCC {:.6}, mean Spearman {:.6}, mean MSE {:.6}",
        s.k,
        emb.nrows(),
        r.mean_pcc(),
        r.mean_spearman(),
        r.mean_mse()
    ))
}

// ---- retrieve-i2g ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct I2gSettings {
    pub data_dir: Option<String>,
    pub checkpoint: Option<String>,
    pub out: Option<String>,
    pub query_split: String,
    pub reference_split: String,
    pub k: usize,
    /// `verbatim` or `clamp_zero`.
    pub weight_mode: String,
}

pub fn retrieve_i2g(flat: &Flat) -> Result<String> {
    let s = resolve(
        &I2gSettings {
            data_dir: data_root("processed"),
            checkpoint: None,
            out: None,
            query_split: "heldout".into(),
            reference_split: "train".into(),
            k: seal_core::eval::retrieval::DEFAULT_K,
            weight_mode: "verbatim".into(),
        },
        flat,
    )?;
    let mode = match s.weight_mode.as_str() {
        "verbatim" => WeightMode::Verbatim,
        "clamp_zero" => WeightMode::ClampZero,
        other => return Err(SealError::Config(format!("weight_mode `{other}` is not one of verbatim, clamp_zero"))),
    };
    let data_dir = require(&s.data_dir, "data_dir", "--data")?;
    let ck_dir = require(&s.checkpoint, "checkpoint", "--ckpt")?;
    let data = load_dataset(&data_dir)?;
    let ck = load_checkpoint(Path::new(&ck_dir))?;
    let query = select(&data, &s.query_split)?;
    let refs = select(&data, &s.reference_split)?;
    let qe = ck.model.embed_images(&images_of(&query, &s.query_split)?)?;
    let re = ck.model.embed_images(&images_of(&refs, &s.reference_split)?)?;
    let mut pred = ndarray::Array2::zeros(query.expr.dim());
    for (i, q) in qe.axis_iter(Axis(0)).enumerate() {
        pred.row_mut(i).assign(&i2g_retrieve(q, &re, &refs.expr, s.k, mode)?);
    }
    let mut pcc = Vec::new();
    for g in 0..pred.ncols() {
        let p: Vec<f64> = pred.column(g).to_vec();
        let t: Vec<f64> = query.expr.column(g).to_vec();
        pcc.push(metric_pcc(&p, &t)?.value);
    }
    let mean = pcc.iter().sum::<f64>() / pcc.len().max(1) as f64;
    if let Some(out) = &s.out {
        let mut text = String::from("sample\tspot");
        for g in &data.panel.genes {
            text.push('\t');
            text.push_str(g);
        }
        text.push('\n');
        let picked = pick(&data, &s.query_split)?;
        for (i, &(k, spot)) in query.origin.iter().enumerate() {
            let t = &picked[k].table;
            let _ = write!(text, "{}\t{}", t.sample_id, t.barcodes[spot]);
            for v in pred.row(i) {
                let _ = write!(text, "\t{v}");
            }
            text.push('\n');
        }
        write_atomic(Path::new(out), text.as_bytes())?;
    }
    Ok(format!(
        "retrieved {} query spots against {} references (k = {}): mean gene PCC {mean:.6}",
        qe.nrows(),
        re.nrows(),
        s.k
    ))
}

// ---- retrieve-g2i ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct G2iSettings {
    pub data_dir: Option<String>,
    pub checkpoint: Option<String>,
    pub out: Option<String>,
    pub sample: Option<String>,
    pub genes: Vec<String>,
    pub cell_px: u32,
}

pub fn retrieve_g2i(flat: &Flat) -> Result<String> {
    let s = resolve(
        &G2iSettings {
            data_dir: data_root("processed"),
            checkpoint: None,
            out: None,
            sample: None,
            genes: Vec::new(),
            cell_px: 8,
        },
        flat,
    )?;
    let data_dir = require(&s.data_dir, "data_dir", "--data")?;
    let ck_dir = require(&s.checkpoint, "checkpoint", "--ckpt")?;
    let out = require(&s.out, "out", "--out")?;
    let sample = require(&s.sample, "sample", "--sample")?;
    if s.genes.is_empty() {
        return Err(SealError::Config("missing config key `genes` (set it in --config or pass --genes)".into()));
    }
    let data = load_dataset(&data_dir)?;
    let ck = load_checkpoint(Path::new(&ck_dir))?;
    let ps = data
        .samples
        .iter()
        .find(|p| p.table.sample_id == sample)
        .ok_or_else(|| SealError::InvalidArgument(format!("no sample `{sample}` in {data_dir}")))?;
    let images = ps.images.as_ref().ok_or_else(|| SealError::Empty(format!("sample `{sample}` has no images")))?;
    let query = g2i_build_query(&s.genes, &ps.table, |m| ck.model.embed_omics(m))?;
    let patches = ck.model.embed_images(images)?;
    let scores = g2i_similarity_map(&query, &patches)?;
    let coords: Vec<(f64, f64)> = ps.table.coords.iter().map(|c| (c.x_um, c.y_um)).collect();
    let out = PathBuf::from(out);
    write_similarity_tsv(&out.with_extension("tsv"), &coords, &scores)?;
    write_similarity_png(&out.with_extension("png"), &coords, &scores, s.cell_px)?;
    Ok(format!(
        "{} active, {} expanded genes, {} query spots; map → {}.{{tsv,png}}",
        query.active_genes.len(),
        query.expanded_genes.len(),
        query.kept_spots.len(),
        out.display()
    ))
}

// ---- inspect-ckpt ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectSettings {
    pub checkpoint: Option<String>,
    pub list_arrays: bool,
}

pub fn inspect_ckpt(flat: &Flat) -> Result<String> {
    let s = resolve(
        &InspectSettings {
            checkpoint: None,
            list_arrays: false,
        },
        flat,
    )?;
    let dir = require(&s.checkpoint, "checkpoint", "--ckpt")?;
    let m = read_manifest(Path::new(&dir))?;
    // full load verifies every digest
    load_checkpoint(Path::new(&dir))?;
    let mut text = format!(
        "format {} v{}  stage {:?}  step {}\ngenes {}  latent {}  vision {}\n",
        m.format,
        m.version,
        m.stage,
        m.step,
        m.model.genes.len(),
        m.model.vae.latent_dim,
        m.model.vision.as_ref().map_or("none".to_string(), |v| format!(
            "{}px/{} depth {} width {}, adapters rank {} on {} blocks",
            v.vit.image_size, v.vit.patch_px, v.vit.depth, v.vit.width, v.plan.rank, v.plan.n_finetune_blocks
        ))
    );
    let mut groups: std::collections::BTreeMap<&str, (usize, usize, usize)> = Default::default();
    for a in &m.arrays {
        let g = a.file.split('/').next().unwrap_or("");
        let e = groups.entry(g).or_default();
        e.0 += 1;
        e.1 += a.rows * a.cols;
        if a.trainable {
            e.2 += a.rows * a.cols;
        }
    }
    for (g, (n, entries, trainable)) in &groups {
        let _ = writeln!(text, "{g:<10} {n:>4} arrays {entries:>10} values {trainable:>10} trainable");
    }
    if s.list_arrays {
        for a in &m.arrays {
            let _ = writeln!(text, "{}\t{}×{}\t{}\t{}", a.name, a.rows, a.cols, if a.trainable { "train" } else { "frozen" }, a.digest);
        }
    }
    text.push_str("all digests verified");
    Ok(text)
}

//! Checkpoint container: `manifest.json` plus one SEALEMB1 blob per array.
//!
//! Arrays are grouped into `omics/`, `backbone/`, `adapters/` and `heads/`
//! so that the adapters can be shipped without the backbone.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob::{fnv1a64, write_atomic, EmbeddingBlob};
use crate::error::{Result, SealError};
use crate::train::{ModelConfig, SealModel, TrainConfig, OMICS_PREFIX};
use seal_autodiff::ParamKind;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "seal-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Omics,
    Aligned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream().to_string(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| SealError::Malformed(format!("checkpoint rng {what} is not valid"));
        if self.seed.len() != 64 {
            return Err(bad("seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream.parse().map_err(|_| bad("stream"))?);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word_pos"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub trainable: bool,
    pub buffer: bool,
    /// FNV-1a of the blob file, hex.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub stage: StageTag,
    pub step: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rng: RngState,
    pub arrays: Vec<ArrayEntry>,
}

/// Everything needed to resume or evaluate.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: StageTag,
    pub step: usize,
    pub model: SealModel,
    pub train: TrainConfig,
    pub rng: ChaCha8Rng,
}

/// Directory group for a parameter name.
pub fn group_of(name: &str) -> &'static str {
    if name.contains(".lora_") {
        "adapters"
    } else if name.starts_with(OMICS_PREFIX) {
        "omics"
    } else if name.starts_with("head.") {
        "heads"
    } else {
        "backbone"
    }
}

pub fn hex(d: u64) -> String {
    format!("{d:016x}")
}

pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| SealError::io(dir, e))?;
    let mut arrays = Vec::new();
    for (_, p) in ck.model.store.iter() {
        let group = group_of(&p.name);
        let sub = dir.join(group);
        fs::create_dir_all(&sub).map_err(|e| SealError::io(&sub, e))?;
        let file = format!("{group}/{}.bin", p.name);
        let bytes = EmbeddingBlob::from_matrix(&p.value).to_bytes();
        write_atomic(&dir.join(&file), &bytes)?;
        arrays.push(ArrayEntry {
            name: p.name.clone(),
            file,
            rows: p.value.nrows(),
            cols: p.value.ncols(),
            dtype: "f32".into(),
            trainable: p.trainable,
            buffer: p.kind == ParamKind::Buffer,
            digest: hex(fnv1a64(&bytes)),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        stage: ck.stage,
        step: ck.step,
        model: ck.model.config.clone(),
        train: ck.train.clone(),
        rng: RngState::capture(&ck.rng),
        arrays,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(SealError::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| SealError::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| SealError::Malformed(format!("{}: {e}", path.display())))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
        return Err(SealError::Malformed(format!("{} is not a checkpoint manifest", path.display())));
    }
    let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(SealError::Version {
            expected: CHECKPOINT_VERSION,
            found,
        });
    }
    serde_json::from_value(raw).map_err(|e| SealError::Malformed(format!("{}: {e}", path.display())))
}

fn read_array(dir: &Path, entry: &ArrayEntry) -> Result<Array2<f64>> {
    let path: PathBuf = dir.join(&entry.file);
    if !path.exists() {
        return Err(SealError::MissingFile(path));
    }
    let bytes = fs::read(&path).map_err(|e| SealError::io(&path, e))?;
    let got = hex(fnv1a64(&bytes));
    if got != entry.digest {
        return Err(SealError::Digest(format!("{}: manifest {} but file hashes to {got}", entry.file, entry.digest)));
    }
    let blob = EmbeddingBlob::from_bytes(&bytes)?;
    if (blob.rows, blob.cols) != (entry.rows, entry.cols) {
        return Err(SealError::DimensionMismatch(format!(
            "{}: manifest says {}×{}, blob holds {}×{}",
            entry.file, entry.rows, entry.cols, blob.rows, blob.cols
        )));
    }
    Ok(blob.to_matrix())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let mut model = SealModel::skeleton(&manifest.model)?;
    if manifest.arrays.len() != model.store.len() {
        return Err(SealError::Malformed(format!(
            "checkpoint lists {} arrays, the model has {}",
            manifest.arrays.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.arrays {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| SealError::Malformed(format!("unexpected array {}", entry.name)))?;
        let want = model.store.value(id).dim();
        if want != (entry.rows, entry.cols) {
            return Err(SealError::DimensionMismatch(format!(
                "{}: model expects {:?}, checkpoint has {}×{}",
                entry.name, want, entry.rows, entry.cols
            )));
        }
        let value = read_array(dir, entry)?;
        model.store.set_value(id, value);
        model.store.set_trainable(id, entry.trainable);
    }
    Ok(Checkpoint {
        stage: manifest.stage,
        step: manifest.step,
        model,
        train: manifest.train,
        rng: manifest.rng.restore()?,
    })
}

/// Digest of every file named in the manifest, keyed by array name.
pub fn array_digests(dir: &Path) -> Result<Vec<(String, String)>> {
    Ok(read_manifest(dir)?.arrays.into_iter().map(|a| (a.name, a.digest)).collect())
}

//! Synthetic coupled expression/image datasets with known latent structure.
//!
//! Each spot carries `k` spatially smooth latent factors. Expression is
//! `scale · softplus(z W + b)` plus Poisson-like noise; the image patch is a
//! deterministic rendering of the same factors (stain, nuclear density,
//! fibre texture, background tint, ...) with a per-domain colour shift.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blob::{write_atomic, EmbeddingBlob};
use crate::error::{Result, SealError};
use crate::expr::io::{sample_dir, write_sample_index};
use crate::expr::{write_sample, SampleMeta, SpotCoord, SpotTable, Stage};
use seal_autodiff::softplus;

pub const MAX_FACTORS: usize = 8;
pub const SPOT_PITCH_UM: f64 = 100.0;
pub const IMAGE_FILE: &str = "images.bin";
pub const SPEC_FILE: &str = "spec.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Total number of samples; sample `i` belongs to domain `i % n_domains`.
    pub n_samples: usize,
    pub spots_per_sample: usize,
    pub n_genes: usize,
    pub latent_factors: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub n_domains: usize,
    /// Euclidean norm of each domain's RGB offset.
    pub domain_shift: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    /// 3 samples per domain × 3 domains, 400 spots, 64 genes, 4 factors.
    fn default() -> Self {
        Self {
            n_samples: 9,
            spots_per_sample: 400,
            n_genes: 64,
            latent_factors: 4,
            image_size: 16,
            noise_sigma: 1.0,
            n_domains: 3,
            domain_shift: 0.15,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SealError::InvalidArgument(m));
        if self.latent_factors == 0 || self.latent_factors > self.n_genes.min(MAX_FACTORS) {
            return bad(format!(
                "latent_factors {} must be in 1..={}",
                self.latent_factors,
                self.n_genes.min(MAX_FACTORS)
            ));
        }
        if self.n_samples == 0 || self.spots_per_sample == 0 || self.n_genes == 0 {
            return bad("n_samples, spots_per_sample and n_genes must be positive".into());
        }
        if self.n_domains == 0 {
            return bad("n_domains must be positive".into());
        }
        if self.image_size < 4 {
            return bad(format!("image_size {} must be at least 4", self.image_size));
        }
        if !(self.noise_sigma >= 0.0) || !(self.domain_shift >= 0.0) {
            return bad("noise_sigma and domain_shift must be non-negative".into());
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * 3
    }
}

/// Ground-truth generative parameters shared by all samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    /// `k × G`
    pub mixing: Array2<f64>,
    pub bias: Array1<f64>,
    pub scale: Array1<f64>,
    /// `n_domains × 3`
    pub domain_shifts: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub table: SpotTable,
    /// `n_spots × (S·S·3)`, interleaved RGB.
    pub images: Array2<f64>,
    /// `n_spots × k`
    pub latents: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub truth: Truth,
    pub samples: Vec<SynthSample>,
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    r
}

fn gene_names(g: usize) -> Vec<String> {
    (0..g).map(|j| format!("GENE{j:04}")).collect()
}

/// Row-major hexagonal grid with Visium parity offsets.
pub fn hex_coords(n: usize) -> Vec<SpotCoord> {
    let per_row = (n as f64).sqrt().ceil().max(1.0) as usize;
    (0..n)
        .map(|i| {
            let r = (i / per_row) as i64;
            let col = 2 * (i % per_row) as i64 + (r & 1);
            SpotCoord {
                row: r,
                col,
                x_um: col as f64 * SPOT_PITCH_UM / 2.0,
                y_um: r as f64 * SPOT_PITCH_UM * 3f64.sqrt() / 2.0,
            }
        })
        .collect()
}

pub fn draw_truth(spec: &SynthSpec) -> Truth {
    let (k, g) = (spec.latent_factors, spec.n_genes);
    let mut rng = stream(spec.seed, 0, 0);
    let gain = 2.0 / (k as f64).sqrt();
    let mixing = Array2::from_shape_fn((k, g), |_| {
        let e: f64 = StandardNormal.sample(&mut rng);
        gain * e
    });
    let bias = Array1::from_shape_fn(g, |_| rng.random_range(-1.0..1.0));
    let scale = Array1::from_shape_fn(g, |_| rng.random_range(2f64.ln()..40f64.ln()).exp());
    let mut domain_shifts = Array2::zeros((spec.n_domains, 3));
    for d in 0..spec.n_domains {
        let v: [f64; 3] = std::array::from_fn(|_| -> f64 { StandardNormal.sample(&mut rng) });
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for c in 0..3 {
            domain_shifts[[d, c]] = spec.domain_shift * v[c] / n;
        }
    }
    Truth {
        mixing,
        bias,
        scale,
        domain_shifts,
    }
}

/// Smooth random field per factor: a sum of plane waves with wavelengths of
/// 3 to 9 spot pitches, standardized within the sample.
pub fn draw_latents(coords: &[SpotCoord], k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    const WAVES: usize = 8;
    let n = coords.len();
    let mut z = Array2::zeros((n, k));
    for f in 0..k {
        for _ in 0..WAVES {
            let wavelength = rng.random_range(3.0..9.0) * SPOT_PITCH_UM;
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let (kx, ky) = (theta.cos() * 2.0 * PI / wavelength, theta.sin() * 2.0 * PI / wavelength);
            for (i, c) in coords.iter().enumerate() {
                z[[i, f]] += (kx * c.x_um + ky * c.y_um + phase).cos();
            }
        }
        let col = z.column(f).to_owned();
        let m = col.mean().unwrap_or(0.0);
        let sd = col.std(0.0);
        let sd = if sd > 0.0 { sd } else { 1.0 };
        z.column_mut(f).mapv_inplace(|v| (v - m) / sd);
    }
    z
}

/// Expected counts `scale_g · softplus(zᵀW_g + b_g)`.
pub fn expected_counts(latents: &Array2<f64>, truth: &Truth) -> Array2<f64> {
    let mut m = latents.dot(&truth.mixing) + &truth.bias;
    m.mapv_inplace(softplus);
    m * &truth.scale
}

/// Rounds `mean + σ·√mean·ε` at zero; `σ = 0` gives `round(mean)`.
pub fn sample_counts(mean: &Array2<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    mean.mapv(|m| {
        let e: f64 = StandardNormal.sample(rng);
        (m + sigma * m.sqrt() * e).max(0.0).round()
    })
}

/// Renders one patch from its latent factors without any domain shift.
pub fn render_patch(z: &[f64], size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let t = |j: usize| z.get(j).map_or(0.0, |v| v.tanh());
    let s = size as f64;
    let stain = 0.5 + 0.5 * t(0);
    let nuc = [0.42 - 0.22 * stain, 0.22 - 0.12 * stain, 0.62 - 0.14 * stain + 0.06 * t(6)];
    let n_nuclei = 2 + (3.0 * (1.0 + t(1))).round() as usize;
    let radius = s * (0.085 + 0.025 * t(1));
    let freq = 1.5 + 1.25 * (1.0 + t(2));
    let angle = PI / 4.0 * (1.0 + t(4));
    let bg = [0.88 - 0.03 * t(3), 0.64 + 0.09 * t(3), 0.78 - 0.07 * t(3)];
    let brightness = 1.0 + 0.08 * t(7);
    let elong = 1.0 + 0.5 * t(5).abs();
    let centres: Vec<(f64, f64, f64)> = (0..n_nuclei)
        .map(|_| (rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(0.0..PI)))
        .collect();
    let mut img = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut mask: f64 = 0.0;
            for &(cx, cy, rot) in &centres {
                let (dx, dy) = (px - cx, py - cy);
                let (u, v) = (dx * rot.cos() + dy * rot.sin(), -dx * rot.sin() + dy * rot.cos());
                let d2 = (u / elong).powi(2) + (v * elong).powi(2);
                mask = mask.max((-d2 / (2.0 * radius * radius)).exp());
            }
            let phase = 2.0 * PI * freq * (px * angle.cos() + py * angle.sin()) / s;
            let fibre = 1.0 + 0.07 * phase.sin();
            for c in 0..3 {
                let e: f64 = StandardNormal.sample(rng);
                let v = (bg[c] * (1.0 - mask) + nuc[c] * mask) * fibre * brightness;
                img[(y * size + x) * 3 + c] = v + 0.02 * e;
            }
        }
    }
    img
}

fn sample_id(i: usize) -> String {
    format!("synth{i:02}")
}

/// Builds the dataset in memory.
pub fn synthesize(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let truth = draw_truth(spec);
    let coords = hex_coords(spec.spots_per_sample);
    let samples = (0..spec.n_samples)
        .map(|i| {
            let mut rng = stream(spec.seed, 1, i as u64);
            let latents = draw_latents(&coords, spec.latent_factors, &mut rng);
            let mean = expected_counts(&latents, &truth);
            let values = sample_counts(&mean, spec.noise_sigma, &mut rng);
            let domain = i % spec.n_domains;
            let shift = truth.domain_shifts.row(domain).to_owned();
            let rows: Vec<Vec<f64>> = (0..coords.len())
                .into_par_iter()
                .map(|s| {
                    let mut r = stream(spec.seed, 2 + i as u64, s as u64);
                    let mut img = render_patch(latents.row(s).as_slice().expect("row-major"), spec.image_size, &mut r);
                    for (p, v) in img.iter_mut().enumerate() {
                        *v += shift[p % 3];
                    }
                    img
                })
                .collect();
            let images = Array2::from_shape_fn((coords.len(), spec.pixels()), |(r, c)| rows[r][c]);
            let id = sample_id(i);
            let table = SpotTable {
                sample_id: id.clone(),
                patient_id: format!("patient{i:02}"),
                organ: "synthetic".into(),
                domain_id: domain,
                barcodes: (0..coords.len()).map(|s| format!("{id}-{s:05}")).collect(),
                coords: coords.clone(),
                values,
                gene_names: gene_names(spec.n_genes),
                stage: Stage::RawCounts,
            };
            SynthSample { table, images, latents }
        })
        .collect();
    Ok(SynthData {
        spec: spec.clone(),
        truth,
        samples,
    })
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Writes the dataset in the sample directory format, plus `images.bin` per
/// sample and ground truth under `truth/`.
pub fn gen_synthetic(spec: &SynthSpec, out_dir: &Path, force: bool) -> Result<SynthData> {
    if is_nonempty_dir(out_dir) && !force {
        return Err(SealError::InvalidArgument(format!(
            "{} exists and is not empty; pass --force to overwrite",
            out_dir.display()
        )));
    }
    let data = synthesize(spec)?;
    let mut metas = Vec::new();
    for s in &data.samples {
        let dir = sample_dir(out_dir, &s.table.sample_id);
        write_sample(&s.table, &dir)?;
        EmbeddingBlob::from_matrix(&s.images).write(&dir.join(IMAGE_FILE))?;
        EmbeddingBlob::from_matrix(&s.latents).write(&out_dir.join("truth").join(format!("{}.latents.bin", s.table.sample_id)))?;
        metas.push(SampleMeta {
            sample_id: s.table.sample_id.clone(),
            patient_id: s.table.patient_id.clone(),
            organ: s.table.organ.clone(),
            domain_id: s.table.domain_id,
        });
    }
    write_sample_index(&out_dir.join("samples.tsv"), &metas)?;
    let truth = out_dir.join("truth");
    EmbeddingBlob::from_matrix(&data.truth.mixing).write(&truth.join("mixing.bin"))?;
    let mut params = Array2::zeros((2, spec.n_genes));
    params.row_mut(0).assign(&data.truth.bias);
    params.row_mut(1).assign(&data.truth.scale);
    EmbeddingBlob::from_matrix(&params).write(&truth.join("gene_bias_scale.bin"))?;
    EmbeddingBlob::from_matrix(&data.truth.domain_shifts).write(&truth.join("domain_shifts.bin"))?;
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    write_atomic(&out_dir.join(SPEC_FILE), json.as_bytes())?;
    Ok(data)
}

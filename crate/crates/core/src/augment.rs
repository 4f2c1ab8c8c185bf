//! Stage II image augmentation on interleaved RGB patches in `[0, 1]`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SealError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_p: f64,
    pub crop_scale: (f64, f64),
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Probability that the colour group fires; one member is then drawn in
    /// proportion to the member weights below.
    pub color_group_p: f64,
    pub brightness_contrast_w: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub rgb_shift_w: f64,
    /// Per-channel `(lo, hi)` offsets on the 0–255 scale.
    pub rgb_shift: [(f64, f64); 3],
    pub channel_shuffle_w: f64,
    pub grayscale_w: f64,
    pub blur_p: f64,
    pub blur_kernel: usize,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_p: 1.0,
            crop_scale: (0.8, 1.0),
            hflip_p: 0.5,
            vflip_p: 0.25,
            color_group_p: 1.0,
            brightness_contrast_w: 1.0,
            brightness: 0.1,
            contrast: 0.1,
            rgb_shift_w: 1.0,
            rgb_shift: [(-30.0, 30.0), (-40.0, 20.0), (-30.0, 30.0)],
            channel_shuffle_w: 0.5,
            grayscale_w: 0.1,
            blur_p: 0.1,
            blur_kernel: 9,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        Self {
            crop_p: 0.0,
            hflip_p: 0.0,
            vflip_p: 0.0,
            color_group_p: 0.0,
            blur_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("crop_p", self.crop_p),
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("color_group_p", self.color_group_p),
            ("blur_p", self.blur_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SealError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let w = [self.brightness_contrast_w, self.rgb_shift_w, self.channel_shuffle_w, self.grayscale_w];
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err(SealError::Config("colour group weights must be non-negative".into()));
        }
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(SealError::Config(format!("crop_scale ({lo}, {hi}) must satisfy 0 < lo ≤ hi ≤ 1")));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(SealError::Config("blur_sigma must be a positive range".into()));
        }
        Ok(())
    }
}

/// Member of the colour one-of group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorOp {
    BrightnessContrast,
    RgbShift,
    ChannelShuffle,
    Grayscale,
}

/// Square image of side `size` stored as `(y·size + x)·3 + c`.
fn at(size: usize, x: usize, y: usize, c: usize) -> usize {
    (y * size + x) * 3 + c
}

pub fn hflip(img: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                out[at(size, x, y, c)] = img[at(size, size - 1 - x, y, c)];
            }
        }
    }
    out
}

pub fn vflip(img: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                out[at(size, x, y, c)] = img[at(size, x, size - 1 - y, c)];
            }
        }
    }
    out
}

/// Bilinear resample of the square window `[x0, x0+side) × [y0, y0+side)`
/// back to `size × size`.
pub fn crop_resize(img: &[f64], size: usize, x0: f64, y0: f64, side: f64) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    let step = side / size as f64;
    let clampi = |v: f64| v.clamp(0.0, (size - 1) as f64);
    for y in 0..size {
        let sy = clampi(y0 + (y as f64 + 0.5) * step - 0.5);
        let (y1, fy) = (sy.floor() as usize, sy - sy.floor());
        let y2 = (y1 + 1).min(size - 1);
        for x in 0..size {
            let sx = clampi(x0 + (x as f64 + 0.5) * step - 0.5);
            let (x1, fx) = (sx.floor() as usize, sx - sx.floor());
            let x2 = (x1 + 1).min(size - 1);
            for c in 0..3 {
                let top = img[at(size, x1, y1, c)] * (1.0 - fx) + img[at(size, x2, y1, c)] * fx;
                let bot = img[at(size, x1, y2, c)] * (1.0 - fx) + img[at(size, x2, y2, c)] * fx;
                out[at(size, x, y, c)] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &[f64], size: usize, kernel: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel / 2) as i64;
    let w: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    let w: Vec<f64> = w.iter().map(|v| v / total).collect();
    let clamp = |v: i64| v.clamp(0, size as i64 - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                tmp[at(size, x, y, c)] = (-r..=r).map(|d| w[(d + r) as usize] * img[at(size, clamp(x as i64 + d), y, c)]).sum();
            }
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                out[at(size, x, y, c)] = (-r..=r).map(|d| w[(d + r) as usize] * tmp[at(size, x, clamp(y as i64 + d), c)]).sum();
            }
        }
    }
    out
}

fn apply_color(img: &mut [f64], op: ColorOp, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) {
    match op {
        ColorOp::BrightnessContrast => {
            let alpha = 1.0 + rng.random_range(-cfg.contrast..=cfg.contrast);
            let beta = rng.random_range(-cfg.brightness..=cfg.brightness);
            img.iter_mut().for_each(|v| *v = alpha * *v + beta);
        }
        ColorOp::RgbShift => {
            let shift: Vec<f64> = cfg.rgb_shift.iter().map(|(lo, hi)| rng.random_range(*lo..=*hi) / 255.0).collect();
            img.iter_mut().enumerate().for_each(|(k, v)| *v += shift[k % 3]);
        }
        ColorOp::ChannelShuffle => {
            let mut perm = [0usize, 1, 2];
            perm.shuffle(rng);
            for px in img.chunks_mut(3) {
                let src = [px[0], px[1], px[2]];
                for c in 0..3 {
                    px[c] = src[perm[c]];
                }
            }
        }
        ColorOp::Grayscale => {
            for px in img.chunks_mut(3) {
                let l = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                px.fill(l);
            }
        }
    }
}

fn pick_color(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Option<ColorOp> {
    let members = [
        (ColorOp::BrightnessContrast, cfg.brightness_contrast_w),
        (ColorOp::RgbShift, cfg.rgb_shift_w),
        (ColorOp::ChannelShuffle, cfg.channel_shuffle_w),
        (ColorOp::Grayscale, cfg.grayscale_w),
    ];
    let total: f64 = members.iter().map(|m| m.1).sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random_range(0.0..total);
    for (op, w) in members {
        if u < w {
            return Some(op);
        }
        u -= w;
    }
    Some(members[3].0)
}

/// Draws `true` with probability `p`; never consumes randomness when `p` is 0.
fn coin(rng: &mut ChaCha8Rng, p: f64) -> bool {
    p > 0.0 && rng.random_bool(p.min(1.0))
}

/// Crop → flips → one colour op → blur.
pub fn augment(img: &[f64], size: usize, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = img.to_vec();
    if coin(rng, cfg.crop_p) {
        let area = rng.random_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let side = area.sqrt() * size as f64;
        let x0 = rng.random_range(0.0..=(size as f64 - side));
        let y0 = rng.random_range(0.0..=(size as f64 - side));
        out = crop_resize(&out, size, x0, y0, side);
    }
    if coin(rng, cfg.hflip_p) {
        out = hflip(&out, size);
    }
    if coin(rng, cfg.vflip_p) {
        out = vflip(&out, size);
    }
    if coin(rng, cfg.color_group_p) {
        if let Some(op) = pick_color(cfg, rng) {
            apply_color(&mut out, op, cfg, rng);
        }
    }
    if coin(rng, cfg.blur_p) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        out = gaussian_blur(&out, size, cfg.blur_kernel.max(1), sigma);
    }
    out
}

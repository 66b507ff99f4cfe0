//! Synthetic triplets with a known per-pixel noise law.
//!
//! `y_hat` is a smooth random field and `s` a smooth positive scale field.
//! `y = clamp(y_hat + noise(s))` with Gaussian (`sigma = s`) or Laplace
//! (`b = s`) noise, and `x` stacks `y_hat` and `s` as two channels so the
//! true uncertainty is visible to a model.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::dataset::{save_dataset, Split, TripletDataset, TripletRecord};
use crate::distortion::{abs_pow, masked_raw, DistortionSpec};
use crate::error::{invalid, Result};
use crate::io::{write_atomic, write_image};
use crate::tensor::{Image, Mask, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Laplace,
}

impl NoiseKind {
    pub fn sample(self, scale: f64, rng: &mut impl Rng) -> f64 {
        match self {
            NoiseKind::Gaussian => scale * rng.sample::<f64, _>(StandardNormal),
            NoiseKind::Laplace => {
                // inverse CDF on (-1/2, 1/2)
                let u: f64 = rng.random::<f64>() - 0.5;
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        }
    }

    /// `E|e|^p` for one pixel of scale `scale`, before clamping.
    pub fn abs_moment(self, scale: f64, p: f64) -> f64 {
        match self {
            NoiseKind::Gaussian => {
                scale.powf(p) * 2f64.powf(p / 2.0) * gamma((p + 1.0) / 2.0) / std::f64::consts::PI.sqrt()
            }
            NoiseKind::Laplace => scale.powf(p) * gamma(p + 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub calibration: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub noise: NoiseKind,
    /// Box-blur radius applied (twice) to white noise.
    #[serde(default = "default_smoothness")]
    pub smoothness: usize,
    #[serde(default)]
    pub seed: u64,
    pub counts: SplitCounts,
    #[serde(default = "default_mean_range")]
    pub mean_range: (f64, f64),
    #[serde(default = "default_scale_range")]
    pub scale_range: (f64, f64),
    /// Each record draws a noise level `g ~ U(level_min, 1)` and stretches its
    /// scale field over `[lo, lo + g (hi - lo)]`, so records differ in
    /// overall noise as well as spatially.
    #[serde(default = "default_level_min")]
    pub level_min: f64,
}

fn one() -> usize {
    1
}
fn default_smoothness() -> usize {
    3
}
fn default_mean_range() -> (f64, f64) {
    (0.3, 0.7)
}
fn default_scale_range() -> (f64, f64) {
    (0.01, 0.09)
}
fn default_level_min() -> f64 {
    0.25
}

impl SyntheticSpec {
    pub fn new(height: usize, width: usize, noise: NoiseKind, counts: SplitCounts, seed: u64) -> Self {
        Self {
            height,
            width,
            channels: 1,
            noise,
            smoothness: default_smoothness(),
            seed,
            counts,
            mean_range: default_mean_range(),
            scale_range: default_scale_range(),
            level_min: default_level_min(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(invalid("synthetic images need a nonempty shape"));
        }
        let (a, b) = self.mean_range;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return Err(invalid("mean_range must satisfy 0 <= lo <= hi <= 1"));
        }
        let (a, b) = self.scale_range;
        if !(0.0 < a && a <= b && b.is_finite()) {
            return Err(invalid("scale_range must be positive and ordered"));
        }
        if !(0.0..=1.0).contains(&self.level_min) {
            return Err(invalid("level_min must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width, self.channels)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SyntheticSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecord {
    pub record: TripletRecord,
    /// Per-pixel noise scale, one channel.
    pub scale: Image,
    /// Whether `3 s` stays inside `[0, 1]` around `y_hat` for at least 99%
    /// of pixels, so that pre-clamp moments describe `y` well.
    pub moment_exact: bool,
}

impl SyntheticRecord {
    /// Per-value scales broadcast to the record's channel layout.
    pub fn scale_values(&self) -> Vec<f64> {
        let c = self.record.y.shape().channels;
        self.scale
            .values()
            .iter()
            .flat_map(|&s| std::iter::repeat_n(s, c))
            .collect()
    }
}

fn box_blur(plane: &mut [f64], h: usize, w: usize, r: usize) {
    if r == 0 {
        return;
    }
    let mut tmp = vec![0.0; plane.len()];
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for k in -(r as isize)..=r as isize {
                acc += plane[row * w + clamp(col as isize + k, w)];
            }
            tmp[row * w + col] = acc / (2 * r + 1) as f64;
        }
    }
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for k in -(r as isize)..=r as isize {
                acc += tmp[clamp(row as isize + k, h) * w + col];
            }
            plane[row * w + col] = acc / (2 * r + 1) as f64;
        }
    }
}

/// White noise blurred and stretched onto `[lo, hi]`.
fn smooth_field(h: usize, w: usize, radius: usize, (lo, hi): (f64, f64), rng: &mut impl Rng) -> Vec<f64> {
    let mut plane: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
    box_blur(&mut plane, h, w, radius);
    box_blur(&mut plane, h, w, radius);
    let min = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    plane
        .iter()
        .map(|&v| {
            let t = if span > 0.0 { (v - min) / span } else { 0.5 };
            lo + t * (hi - lo)
        })
        .collect()
}

fn split_plan(counts: &SplitCounts) -> Vec<Split> {
    let mut plan = vec![Split::Train; counts.train];
    plan.extend(std::iter::repeat_n(Split::Calibration, counts.calibration));
    plan.extend(std::iter::repeat_n(Split::Test, counts.test));
    plan
}

/// splitmix64 finalizer, so that nearby global seeds give unrelated records.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of record `index` (global across splits, train first).
pub fn record_seed(seed: u64, index: usize) -> u64 {
    mix(seed) ^ index as u64
}

fn generate_one(spec: &SyntheticSpec, index: usize, split: Split) -> Result<SyntheticRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(spec.seed, index));
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let plane = Shape::plane(h, w);
    let (lo, hi) = spec.scale_range;
    let level = if spec.level_min < 1.0 { rng.random_range(spec.level_min..=1.0) } else { 1.0 };
    let scale = smooth_field(h, w, spec.smoothness, (lo, lo + level * (hi - lo)), &mut rng);
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| smooth_field(h, w, spec.smoothness, spec.mean_range, &mut rng))
        .collect();
    let mut y_hat = Vec::with_capacity(h * w * c);
    let mut y = Vec::with_capacity(h * w * c);
    let mut safe = 0usize;
    for i in 0..h * w {
        let mut ok = true;
        for ch in means.iter() {
            let m = ch[i];
            y_hat.push(m);
            y.push((m + spec.noise.sample(scale[i], &mut rng)).clamp(0.0, 1.0));
            ok &= 3.0 * scale[i] < m.min(1.0 - m);
        }
        safe += ok as usize;
    }
    let shape = spec.shape();
    let y_hat = Image::new(shape, y_hat)?;
    let scale = Image::new(plane, scale)?;
    let mean_plane = Image::new(plane, y_hat.channel_mean())?;
    let x = Image::stack_channels(&[&mean_plane, &scale])?;
    let id = format!("{}-{index:06}", split.as_str());
    Ok(SyntheticRecord {
        record: TripletRecord::new(id, x, y_hat, Image::new(shape, y)?, split)?,
        scale,
        moment_exact: safe as f64 >= 0.99 * (h * w) as f64,
    })
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticRecord>> {
    spec.validate()?;
    split_plan(&spec.counts)
        .into_iter()
        .enumerate()
        .map(|(i, split)| generate_one(spec, i, split))
        .collect()
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<TripletDataset> {
    Ok(generate(spec)?.into_iter().map(|r| r.record).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub id: String,
    pub split: Split,
    pub noise: NoiseKind,
    pub scale: String,
    pub moment_exact: bool,
}

/// Writes tensors, `manifest.jsonl`, `scale/<id>.mskt` and
/// `meta/<id>.json`; returns the manifest path.
pub fn write_synthetic(dir: impl AsRef<Path>, spec: &SyntheticSpec, records: &[SyntheticRecord]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let data: TripletDataset = records.iter().map(|r| r.record.clone()).collect();
    let manifest = save_dataset(dir, "manifest.jsonl", &data)?;
    std::fs::create_dir_all(dir.join("scale"))?;
    std::fs::create_dir_all(dir.join("meta"))?;
    for r in records {
        let id = &r.record.id;
        let rel = format!("scale/{id}.mskt");
        write_image(dir.join(&rel), &r.scale)?;
        let side = Sidecar {
            id: id.clone(),
            split: r.record.split,
            noise: spec.noise,
            scale: rel,
            moment_exact: r.moment_exact,
        };
        write_atomic(dir.join(format!("meta/{id}.json")), (serde_json::to_string_pretty(&side)? + "\n").as_bytes())?;
    }
    write_atomic(dir.join("spec.json"), (serde_json::to_string_pretty(spec)? + "\n").as_bytes())?;
    Ok(manifest)
}

/// Monte-Carlo estimate of `E d_m(y, y_hat)` over fresh noise draws around
/// `y_hat`, with its standard error. `scale` holds one value per entry of
/// `y_hat`. With `clamp` the draws are clamped to `[0, 1]` like the generator.
#[allow(clippy::too_many_arguments)]
pub fn mc_expected_masked_distortion(
    m: &Mask,
    y_hat: &Image,
    noise: NoiseKind,
    scale: &[f64],
    d: &DistortionSpec,
    draws: usize,
    seed: u64,
    clamp: bool,
) -> Result<(f64, f64)> {
    m.shape().check_same(&y_hat.shape())?;
    if scale.len() != y_hat.len() {
        return Err(invalid("one scale per value required"));
    }
    if draws < 2 {
        return Err(invalid("at least two draws required"));
    }
    let shape = y_hat.shape();
    let (mv, hv) = (m.values(), y_hat.values());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = vec![0.0; hv.len()];
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..draws {
        for ((yi, &h), &s) in y.iter_mut().zip(hv).zip(scale) {
            let v = h + noise.sample(s, &mut rng);
            *yi = if clamp { v.clamp(0.0, 1.0) } else { v };
        }
        let v = masked_raw(d, mv, &y, hv, shape);
        sum += v;
        sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Pre-clamp `E|y_i - y_hat_i|^p` per entry.
pub fn true_error_moments(noise: NoiseKind, scale: &[f64], p: f64) -> Vec<f64> {
    scale.iter().map(|&s| noise.abs_moment(s, p)).collect()
}

/// Pre-clamp `E d_m` under a p-norm distortion: `sum m_i^p E|e_i|^p`.
pub fn expected_masked_distortion(m: &Mask, noise: NoiseKind, scale: &[f64], p: f64) -> f64 {
    m.values()
        .iter()
        .zip(scale)
        .map(|(&mi, &s)| abs_pow(mi, p) * noise.abs_moment(s, p))
        .sum()
}

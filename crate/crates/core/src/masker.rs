//! A lightweight per-pixel masking model `m_theta(x, y_hat)`.
//!
//! Each pixel is described by seven features computed on channel-averaged
//! planes of `x` (resampled to `y_hat`'s grid) and `y_hat`:
//!
//! | index | feature |
//! |-------|---------|
//! | 0 | x value |
//! | 1 | y_hat value |
//! | 2 | 3x3 local mean of y_hat |
//! | 3 | 3x3 local standard deviation of y_hat |
//! | 4 | central-difference gradient magnitude of y_hat |
//! | 5 | `|x - y_hat|` |
//! | 6 | bias (1) |
//!
//! Borders use reflect padding. The model output is clamped to `[0, 1]` and
//! shared across the channels of the mask.
//!
//! Training minimizes `sum ||m - 1||^2 + mu * d(m*y, m*y_hat)` by mini-batch
//! SGD. Gradients do not flow through clamped outputs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TripletDataset;
use crate::distortion::{abs_pow, DistortionSpec};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Image, Mask};

pub const FEATURE_COUNT: usize = 7;
pub const FEATURE_VERSION: u32 = 1;

/// Per-pixel features, `FEATURE_COUNT` values per pixel in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * FEATURE_COUNT..(i + 1) * FEATURE_COUNT]
    }

    pub fn get(&self, row: usize, col: usize, feature: usize) -> f64 {
        self.data[(row * self.width + col) * FEATURE_COUNT + feature]
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Resample `x` onto `y_hat`'s grid with nearest-neighbour sampling.
pub fn align_input(x: &Image, y_hat: &Image) -> Image {
    let s = y_hat.shape();
    x.resample_nearest(s.height, s.width)
}

pub fn extract_features(x: &Image, y_hat: &Image) -> Result<FeatureGrid> {
    let (sx, sh) = (x.shape(), y_hat.shape());
    if sx.height != sh.height || sx.width != sh.width {
        return Err(Error::ShapeMismatch(sx, sh));
    }
    let (h, w) = (sh.height, sh.width);
    let xp = x.channel_mean();
    let yp = y_hat.channel_mean();
    let at = |r: isize, c: isize| yp[reflect(r, h) * w + reflect(c, w)];
    let mut data = Vec::with_capacity(h * w * FEATURE_COUNT);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let v = at(r + dr, c + dc);
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / 9.0;
            let std = (sq / 9.0 - mean * mean).max(0.0).sqrt();
            let gx = 0.5 * (at(r, c + 1) - at(r, c - 1));
            let gy = 0.5 * (at(r + 1, c) - at(r - 1, c));
            let i = r as usize * w + c as usize;
            data.extend_from_slice(&[
                xp[i],
                yp[i],
                mean,
                std,
                (gx * gx + gy * gy).sqrt(),
                (xp[i] - yp[i]).abs(),
                1.0,
            ]);
        }
    }
    Ok(FeatureGrid {
        height: h,
        width: w,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ModelKind {
    Linear,
    Mlp { hidden: usize },
}

/// The regressor itself, acting on standardized feature rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Net {
    Linear {
        weights: Vec<f64>,
    },
    /// One tanh hidden layer.
    Mlp {
        hidden: usize,
        /// `hidden x FEATURE_COUNT`, row-major
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    kind: String,
    feature_version: u32,
    weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shift: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<Vec<f64>>,
}

impl Net {
    pub fn linear(weights: Vec<f64>) -> Result<Self> {
        if weights.len() != FEATURE_COUNT {
            return Err(invalid(format!(
                "linear model needs {FEATURE_COUNT} weights, got {}",
                weights.len()
            )));
        }
        Ok(Net::Linear { weights })
    }

    /// Seeded initial parameters. Outputs start near `bias` everywhere.
    pub fn init(kind: ModelKind, bias: f64, rng: &mut impl Rng) -> Self {
        match kind {
            ModelKind::Linear => {
                let mut weights = vec![0.0; FEATURE_COUNT];
                weights[FEATURE_COUNT - 1] = bias;
                Net::Linear { weights }
            }
            ModelKind::Mlp { hidden } => {
                let a = 1.0 / (FEATURE_COUNT as f64).sqrt();
                let b = 0.1 / (hidden.max(1) as f64).sqrt();
                Net::Mlp {
                    hidden,
                    w1: (0..hidden * FEATURE_COUNT).map(|_| rng.random_range(-a..a)).collect(),
                    b1: vec![0.0; hidden],
                    w2: (0..hidden).map(|_| rng.random_range(-b..b)).collect(),
                    b2: bias,
                }
            }
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Net::Linear { .. } => ModelKind::Linear,
            Net::Mlp { hidden, .. } => ModelKind::Mlp { hidden: *hidden },
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Net::Linear { weights } => weights.len(),
            Net::Mlp { hidden, .. } => hidden * FEATURE_COUNT + 2 * hidden + 1,
        }
    }

    /// Unclamped output for one feature row.
    pub fn raw(&self, f: &[f64]) -> f64 {
        match self {
            Net::Linear { weights } => weights.iter().zip(f).map(|(w, v)| w * v).sum(),
            Net::Mlp { hidden, w1, b1, w2, b2 } => {
                let mut out = *b2;
                for j in 0..*hidden {
                    let row = &w1[j * FEATURE_COUNT..(j + 1) * FEATURE_COUNT];
                    let a: f64 = b1[j] + row.iter().zip(f).map(|(w, v)| w * v).sum::<f64>();
                    out += w2[j] * a.tanh();
                }
                out
            }
        }
    }

    /// Adds `scale * d raw / d theta` to `grad` (flattened parameter order).
    fn accumulate_grad(&self, f: &[f64], scale: f64, grad: &mut [f64]) {
        match self {
            Net::Linear { .. } => {
                for (g, v) in grad.iter_mut().zip(f) {
                    *g += scale * v;
                }
            }
            Net::Mlp { hidden, w1, b1, w2, .. } => {
                let h = *hidden;
                let (gw1, rest) = grad.split_at_mut(h * FEATURE_COUNT);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(h);
                for j in 0..h {
                    let row = &w1[j * FEATURE_COUNT..(j + 1) * FEATURE_COUNT];
                    let a: f64 = b1[j] + row.iter().zip(f).map(|(w, v)| w * v).sum::<f64>();
                    let t = a.tanh();
                    gw2[j] += scale * t;
                    let back = scale * w2[j] * (1.0 - t * t);
                    gb1[j] += back;
                    for (g, v) in gw1[j * FEATURE_COUNT..(j + 1) * FEATURE_COUNT].iter_mut().zip(f) {
                        *g += back * v;
                    }
                }
                gb2[0] += scale;
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut f64> {
        match self {
            Net::Linear { weights } => weights.iter_mut().collect(),
            Net::Mlp { w1, b1, w2, b2, .. } => w1
                .iter_mut()
                .chain(b1.iter_mut())
                .chain(w2.iter_mut())
                .chain(std::iter::once(b2))
                .collect(),
        }
    }

    fn step(&mut self, grad: &[f64], lr: f64) {
        for (p, g) in self.params_mut().into_iter().zip(grad) {
            *p -= lr * g;
        }
    }

    fn to_file(&self, norm: &FeatureNorm) -> ModelFile {
        let mut file = match self {
            Net::Linear { weights } => ModelFile {
                kind: "linear".into(),
                feature_version: FEATURE_VERSION,
                weights: weights.clone(),
                hidden: None,
                shift: None,
                scale: None,
            },
            Net::Mlp { hidden, w1, b1, w2, b2 } => ModelFile {
                kind: "mlp".into(),
                feature_version: FEATURE_VERSION,
                weights: w1.iter().chain(b1).chain(w2).chain(std::iter::once(b2)).copied().collect(),
                hidden: Some(*hidden),
                shift: None,
                scale: None,
            },
        };
        if !norm.is_identity() {
            file.shift = Some(norm.shift.to_vec());
            file.scale = Some(norm.scale.to_vec());
        }
        file
    }

    fn from_file(file: &ModelFile) -> Result<Self> {
        if file.feature_version != FEATURE_VERSION {
            return Err(Error::Format(format!(
                "model feature version {} != {FEATURE_VERSION}",
                file.feature_version
            )));
        }
        match file.kind.as_str() {
            "linear" => Net::linear(file.weights.clone()),
            "mlp" => {
                let h = file.hidden.ok_or_else(|| Error::Format("mlp model without `hidden`".into()))?;
                let need = h * FEATURE_COUNT + 2 * h + 1;
                if file.weights.len() != need {
                    return Err(Error::Format(format!(
                        "mlp with {h} hidden units needs {need} weights, got {}",
                        file.weights.len()
                    )));
                }
                let w = &file.weights;
                let (w1, rest) = w.split_at(h * FEATURE_COUNT);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h);
                Ok(Net::Mlp {
                    hidden: h,
                    w1: w1.to_vec(),
                    b1: b1.to_vec(),
                    w2: w2.to_vec(),
                    b2: b2[0],
                })
            }
            other => Err(Error::Format(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Per-feature affine standardization `(f - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureNorm {
    pub shift: [f64; FEATURE_COUNT],
    pub scale: [f64; FEATURE_COUNT],
}

impl Default for FeatureNorm {
    fn default() -> Self {
        Self {
            shift: [0.0; FEATURE_COUNT],
            scale: [1.0; FEATURE_COUNT],
        }
    }
}

impl FeatureNorm {
    /// Mean and standard deviation of every feature over all pixels. The
    /// bias and constant features are left untouched.
    pub fn fit<'a>(grids: impl IntoIterator<Item = &'a FeatureGrid>) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; FEATURE_COUNT];
        let mut sq = [0.0; FEATURE_COUNT];
        for g in grids {
            for i in 0..g.pixels() {
                for (k, v) in g.pixel(i).iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            n += g.pixels();
        }
        let mut norm = Self::default();
        if n == 0 {
            return norm;
        }
        for k in 0..FEATURE_COUNT - 1 {
            let mean = sum[k] / n as f64;
            let sd = (sq[k] / n as f64 - mean * mean).max(0.0).sqrt();
            if sd > 1e-9 {
                norm.shift[k] = mean;
                norm.scale[k] = sd;
            }
        }
        norm
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    #[inline]
    pub fn apply(&self, f: &[f64]) -> [f64; FEATURE_COUNT] {
        let mut out = [0.0; FEATURE_COUNT];
        for k in 0..FEATURE_COUNT {
            out[k] = (f[k] - self.shift[k]) / self.scale[k];
        }
        out
    }

    fn from_parts(shift: Option<&Vec<f64>>, scale: Option<&Vec<f64>>) -> Result<Self> {
        let mut norm = Self::default();
        for (src, dst) in [(shift, &mut norm.shift), (scale, &mut norm.scale)] {
            if let Some(v) = src {
                if v.len() != FEATURE_COUNT {
                    return Err(Error::Format(format!("feature normalization needs {FEATURE_COUNT} values")));
                }
                dst.copy_from_slice(v);
            }
        }
        if norm.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Format("feature scales must be positive".into()));
        }
        Ok(norm)
    }
}

/// A per-pixel regressor over [`FeatureGrid`] rows: standardization
/// followed by a [`Net`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskerModel {
    pub net: Net,
    pub norm: FeatureNorm,
}

impl MaskerModel {
    pub fn linear(weights: Vec<f64>) -> Result<Self> {
        Ok(Net::linear(weights)?.into())
    }

    pub fn init(kind: ModelKind, bias: f64, rng: &mut impl Rng) -> Self {
        Net::init(kind, bias, rng).into()
    }

    pub fn with_norm(mut self, norm: FeatureNorm) -> Self {
        self.norm = norm;
        self
    }

    pub fn kind(&self) -> ModelKind {
        self.net.kind()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Unclamped output for one raw feature row.
    pub fn raw(&self, f: &[f64]) -> f64 {
        self.net.raw(&self.norm.apply(f))
    }

    pub fn predict_plane(&self, features: &FeatureGrid) -> Vec<f64> {
        (0..features.pixels())
            .map(|i| self.raw(features.pixel(i)).clamp(0.0, 1.0))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.net.to_file(&self.norm))? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    fn from_file(file: ModelFile) -> Result<Self> {
        let net = Net::from_file(&file)?;
        let norm = FeatureNorm::from_parts(file.shift.as_ref(), file.scale.as_ref())?;
        Ok(MaskerModel { net, norm })
    }

    pub(crate) fn to_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self.net.to_file(&self.norm))?)
    }

    pub(crate) fn from_value(v: serde_json::Value) -> Result<Self> {
        Self::from_file(serde_json::from_value(v)?)
    }
}

impl From<Net> for MaskerModel {
    fn from(net: Net) -> Self {
        MaskerModel {
            net,
            norm: FeatureNorm::default(),
        }
    }
}

/// The model's mask for one input pair, shaped like `y_hat`.
pub fn predict_mask(model: &MaskerModel, x: &Image, y_hat: &Image) -> Result<Mask> {
    let features = extract_features(&align_input(x, y_hat), y_hat)?;
    Mask::from_plane(y_hat.shape(), &model.predict_plane(&features))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mu: f64,
    /// Defaults to 1e-2 for linear models and 1e-3 for MLPs.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub distortion: DistortionSpec,
    pub model: ModelKind,
    /// Standardize features with train-set statistics stored in the model.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mu: 2.0,
            learning_rate: None,
            batch_size: 25,
            epochs: 20,
            seed: 0,
            distortion: DistortionSpec::L2,
            model: ModelKind::Linear,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.model {
            ModelKind::Linear => 1e-2,
            ModelKind::Mlp { .. } => 1e-3,
        })
    }

    pub(crate) fn feature_norm(&self, data: &[Prepared]) -> FeatureNorm {
        if self.standardize {
            FeatureNorm::fit(data.iter().map(|d| &d.features))
        } else {
            FeatureNorm::default()
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(invalid("mu must be finite and nonnegative"));
        }
        if !(self.lr() > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if let ModelKind::Mlp { hidden: 0 } = self.model {
            return Err(invalid("mlp needs at least one hidden unit"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMasker {
    pub model: MaskerModel,
    /// Mean per-pixel loss of each epoch, accumulated over its mini-batches.
    pub loss_trace: Vec<f64>,
}

/// Features plus per-pixel targets for one record.
pub(crate) struct Prepared {
    pub features: FeatureGrid,
    /// per pixel, the channel values of `y - y_hat` or of `y`
    pub targets: Vec<f64>,
    pub channels: usize,
}

pub(crate) fn prepare(data: &TripletDataset, residual: bool) -> Result<Vec<Prepared>> {
    data.iter()
        .map(|r| {
            let features = extract_features(&align_input(&r.x, &r.y_hat), &r.y_hat)?;
            let targets = if residual {
                r.y.values().iter().zip(r.y_hat.values()).map(|(a, b)| a - b).collect()
            } else {
                r.y.values().to_vec()
            };
            Ok(Prepared {
                features,
                targets,
                channels: r.y.shape().channels,
            })
        })
        .collect()
}

/// Generic mini-batch SGD over prepared records. `pixel_loss(raw, targets)`
/// returns the loss and its derivative with respect to the raw output.
pub(crate) fn sgd<F>(
    model: &mut MaskerModel,
    data: &[Prepared],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    pixel_loss: F,
) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> (f64, f64),
{
    let lr = cfg.lr();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; model.param_count()];
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut epoch_pixels = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut pixels = 0usize;
            for &k in batch {
                let rec = &data[k];
                let c = rec.channels;
                for i in 0..rec.features.pixels() {
                    let f = model.norm.apply(rec.features.pixel(i));
                    let raw = model.net.raw(&f);
                    let (loss, dl) = pixel_loss(raw, &rec.targets[i * c..(i + 1) * c]);
                    epoch_loss += loss;
                    if dl != 0.0 {
                        model.net.accumulate_grad(&f, dl, &mut grad);
                    }
                }
                pixels += rec.features.pixels();
            }
            epoch_pixels += pixels;
            let inv = 1.0 / pixels.max(1) as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            model.net.step(&grad, lr);
        }
        let mean = epoch_loss / epoch_pixels.max(1) as f64;
        trace.push(mean);
        let params_ok = model.net.params_mut().into_iter().all(|p| p.is_finite());
        if !mean.is_finite() || !params_ok {
            return Err(Error::Divergence { epoch, trace });
        }
    }
    Ok(trace)
}

/// Per-pixel masking loss `C (m - 1)^2 + mu * m^p * sum_c |e_c|^p` with
/// `m = clamp(raw)`, and its derivative in `raw` (zero where clamped).
pub fn masking_pixel_loss(raw: f64, residuals: &[f64], mu: f64, p: f64) -> (f64, f64) {
    let m = raw.clamp(0.0, 1.0);
    let c = residuals.len() as f64;
    let err: f64 = residuals.iter().map(|&e| abs_pow(e, p)).sum();
    let loss = c * (m - 1.0) * (m - 1.0) + mu * abs_pow(m, p) * err;
    if !(0.0..=1.0).contains(&raw) {
        return (loss, 0.0);
    }
    let dm = if p == 1.0 {
        if m > 0.0 {
            mu * err
        } else {
            0.0
        }
    } else {
        mu * p * m.powf(p - 1.0) * err
    };
    (loss, 2.0 * c * (m - 1.0) + dm)
}

pub fn train_masker(train: &TripletDataset, cfg: &TrainConfig) -> Result<TrainedMasker> {
    cfg.validate()?;
    let p = match cfg.distortion {
        DistortionSpec::PNorm(p) => p,
        DistortionSpec::Ssim => return Err(invalid("masker training supports p-norm distortions only")),
    };
    if train.is_empty() {
        return Err(Error::Empty { what: "train split" });
    }
    let data = prepare(train, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MaskerModel::init(cfg.model, 0.5, &mut rng).with_norm(cfg.feature_norm(&data));
    let mu = cfg.mu;
    let loss_trace = sgd(&mut model, &data, cfg, &mut rng, |raw, res| masking_pixel_loss(raw, res, mu, p))?;
    Ok(TrainedMasker { model, loss_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Split, TripletRecord};
    use crate::tensor::Shape;

    fn single_pixel_set(n: usize, y: f64) -> TripletDataset {
        (0..n)
            .map(|i| {
                let s = Shape::plane(1, 1);
                TripletRecord::new(format!("r{i:03}"), Image::zeros(s), Image::zeros(s), Image::filled(s, y), Split::Train).unwrap()
            })
            .collect()
    }

    #[test]
    fn constant_inputs_have_flat_features() {
        let s = Shape::plane(5, 6);
        let f = extract_features(&Image::filled(s, 0.3), &Image::filled(s, 0.3)).unwrap();
        for r in 0..5 {
            for c in 0..6 {
                assert!(f.get(r, c, 3).abs() < 1e-12);
                assert_eq!(f.get(r, c, 4), 0.0);
                assert_eq!(f.get(r, c, 5), 0.0);
                assert_eq!(f.get(r, c, 6), 1.0);
            }
        }
    }

    #[test]
    fn reflect_padding() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(0, 1), 0);
        assert_eq!(reflect(1, 1), 0);
    }

    #[test]
    fn feature_grid_rejects_mismatched_grid() {
        let err = extract_features(&Image::zeros(Shape::plane(2, 2)), &Image::zeros(Shape::plane(3, 3)));
        assert!(err.is_err());
    }

    #[test]
    fn prediction_extremes() {
        let s = Shape::new(3, 3, 2);
        let x = Image::filled(s, 0.4);
        let mut w = vec![0.0; FEATURE_COUNT];
        w[6] = 10.0;
        let big = MaskerModel::linear(w).unwrap();
        assert_eq!(predict_mask(&big, &x, &x).unwrap().values(), &[1.0; 18]);
        let zero = MaskerModel::linear(vec![0.0; FEATURE_COUNT]).unwrap();
        assert_eq!(predict_mask(&zero, &x, &x).unwrap().values(), &[0.0; 18]);
    }

    #[test]
    fn pixel_loss_gradient_matches_finite_differences() {
        for p in [1.0, 1.5, 2.0, 3.0] {
            for raw in [0.1, 0.4, 0.9] {
                let res = [0.3, -0.2];
                let (_, g) = masking_pixel_loss(raw, &res, 2.0, p);
                let h = 1e-6;
                let fd = (masking_pixel_loss(raw + h, &res, 2.0, p).0 - masking_pixel_loss(raw - h, &res, 2.0, p).0) / (2.0 * h);
                assert!((g - fd).abs() < 1e-6, "p={p} raw={raw}: {g} vs {fd}");
            }
        }
        assert_eq!(masking_pixel_loss(1.5, &[0.3], 2.0, 2.0).1, 0.0);
        assert_eq!(masking_pixel_loss(-0.5, &[0.3], 2.0, 2.0).1, 0.0);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Net::init(ModelKind::Mlp { hidden: 4 }, 0.5, &mut rng);
        let f = [0.2, 0.7, 0.5, 0.1, 0.05, 0.5, 1.0];
        let mut grad = vec![0.0; model.param_count()];
        model.accumulate_grad(&f, 1.0, &mut grad);
        for k in 0..grad.len() {
            let mut up = model.clone();
            *up.params_mut()[k] += 1e-6;
            let mut dn = model.clone();
            *dn.params_mut()[k] -= 1e-6;
            let fd = (up.raw(&f) - dn.raw(&f)) / 2e-6;
            assert!((grad[k] - fd).abs() < 1e-7, "param {k}");
        }
    }

    #[test]
    fn model_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [ModelKind::Linear, ModelKind::Mlp { hidden: 3 }] {
            let mut norm = FeatureNorm::default();
            norm.shift[2] = 0.25;
            norm.scale[2] = 0.125;
            let m = MaskerModel::init(kind, 0.5, &mut rng).with_norm(norm);
            let text = m.to_json().unwrap();
            assert!(text.contains("\"feature_version\": 1"));
            assert_eq!(MaskerModel::from_json(&text).unwrap(), m);
        }
        assert!(MaskerModel::from_json(r#"{"kind":"linear","feature_version":2,"weights":[0,0,0,0,0,0,0]}"#).is_err());
        assert!(MaskerModel::from_json(r#"{"kind":"mlp","feature_version":1,"weights":[0]}"#).is_err());
    }

    #[test]
    fn perfect_predictions_train_to_full_mask() {
        let s = Shape::plane(4, 4);
        let ds: TripletDataset = (0..10)
            .map(|i| {
                let v = Image::filled(s, 0.1 * i as f64);
                TripletRecord::new(format!("r{i}"), v.clone(), v.clone(), v, Split::Train).unwrap()
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 5,
            ..TrainConfig::default()
        };
        let trained = train_masker(&ds, &cfg).unwrap();
        let r = &ds.records()[3];
        let m = predict_mask(&trained.model, &r.x, &r.y_hat).unwrap();
        assert!(m.values().iter().sum::<f64>() / m.len() as f64 >= 0.99);
    }

    #[test]
    fn zero_mu_ignores_errors() {
        let cfg = TrainConfig {
            mu: 0.0,
            epochs: 400,
            ..TrainConfig::default()
        };
        let ds = single_pixel_set(25, 0.9);
        let trained = train_masker(&ds, &cfg).unwrap();
        let r = &ds.records()[0];
        assert!(predict_mask(&trained.model, &r.x, &r.y_hat).unwrap().values()[0] >= 0.99);
    }

    fn analytic_fit(p: f64, y: f64) -> f64 {
        let cfg = TrainConfig {
            distortion: DistortionSpec::pnorm(p).unwrap(),
            epochs: 200,
            ..TrainConfig::default()
        };
        let ds = single_pixel_set(50, y);
        let trained = train_masker(&ds, &cfg).unwrap();
        let r = &ds.records()[0];
        predict_mask(&trained.model, &r.x, &r.y_hat).unwrap().values()[0]
    }

    #[test]
    fn single_pixel_minimizers() {
        // (m - 1)^2 + 2 m^2 e with e = 0.5 and (m - 1)^2 + 2 m e with e = 0.5
        let m2 = analytic_fit(2.0, 0.5f64.sqrt());
        assert!((m2 - 0.5).abs() < 1e-2, "p=2: {m2}");
        let m1 = analytic_fit(1.0, 0.5);
        assert!((m1 - 0.5).abs() < 1e-2, "p=1: {m1}");
    }

    #[test]
    fn first_epoch_lowers_loss() {
        let ds = single_pixel_set(50, 0.5f64.sqrt());
        let data = prepare(&ds, true).unwrap();
        let total = |m: &MaskerModel| -> f64 {
            data.iter()
                .map(|d| masking_pixel_loss(m.raw(d.features.pixel(0)), &d.targets, 2.0, 2.0).0)
                .sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = MaskerModel::init(ModelKind::Linear, 0.9, &mut rng);
        let before = total(&model);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        sgd(&mut model, &data, &cfg, &mut rng, |raw, res| masking_pixel_loss(raw, res, 2.0, 2.0)).unwrap();
        assert!(total(&model) < before);
    }

    #[test]
    fn hand_computed_local_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = Shape::plane(8, 8);
        let v: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let y_hat = Image::new(s, v.clone()).unwrap();
        let f = extract_features(&y_hat, &y_hat).unwrap();
        let (r, c) = (3, 5);
        let mut acc = 0.0;
        for dr in 0..3 {
            for dc in 0..3 {
                acc += v[(r + dr - 1) * 8 + c + dc - 1];
            }
        }
        assert!((f.get(r, c, 2) - acc / 9.0).abs() < 1e-12);
        assert_eq!(f.get(r, c, 5), 0.0);
    }

    #[test]
    fn rejects_ssim_and_empty() {
        let cfg = TrainConfig {
            distortion: DistortionSpec::Ssim,
            ..TrainConfig::default()
        };
        assert!(train_masker(&single_pixel_set(2, 0.5), &cfg).is_err());
        assert!(matches!(
            train_masker(&TripletDataset::default(), &TrainConfig::default()),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn non_finite_loss_is_reported_as_divergence() {
        let data = prepare(&single_pixel_set(4, 0.7), true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = MaskerModel::init(ModelKind::Linear, 0.5, &mut rng);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        match sgd(&mut model, &data, &cfg, &mut rng, |_, _| (f64::NAN, 0.0)) {
            Err(Error::Divergence { epoch, trace }) => {
                assert_eq!(epoch, 0);
                assert!(trace[0].is_nan());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}

//! Comparison heuristics: the UNI scalar mask and pixel-wise quantile
//! intervals turned into a mask.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TripletDataset;
use crate::distortion::DistortionSpec;
use crate::error::{invalid, Error, Result};
use crate::masker::{align_input, extract_features, prepare, sgd, MaskerModel, TrainConfig};
use crate::tensor::{Image, Mask};

pub const DEFAULT_LEVELS: (f64, f64) = (0.05, 0.95);

fn pnorm_exponent(d: &DistortionSpec) -> Result<f64> {
    d.exponent()
        .ok_or_else(|| invalid("the UNI baseline needs a p-norm distortion"))
}

fn uni_from_distortion(alpha: f64, dist: f64, p: f64) -> f64 {
    if dist <= alpha {
        1.0
    } else {
        (alpha / dist).powf(1.0 / p).min(1.0)
    }
}

/// The largest scalar `mu_k` with `d(mu_k y_k, mu_k y_hat_k) <= alpha`, per record.
pub fn uni_per_sample(calibration: &TripletDataset, d: &DistortionSpec, alpha: f64) -> Result<Vec<f64>> {
    let p = pnorm_exponent(d)?;
    calibration
        .iter()
        .map(|r| Ok(uni_from_distortion(alpha, d.distance(&r.y, &r.y_hat)?, p)))
        .collect()
}

/// A single scalar that keeps at least a `beta` fraction of the calibration
/// records within `alpha`. Uses the `ceil(beta (K + 1))`-th smallest unmasked
/// distortion (clamped to `K`) and the p-norm scaling identity.
pub fn uni_scalar(calibration: &TripletDataset, d: &DistortionSpec, alpha: f64, beta: f64) -> Result<f64> {
    let p = pnorm_exponent(d)?;
    if calibration.is_empty() {
        return Err(Error::Empty {
            what: "calibration split",
        });
    }
    let mut dists = calibration
        .iter()
        .map(|r| d.distance(&r.y, &r.y_hat))
        .collect::<Result<Vec<_>>>()?;
    dists.sort_by(f64::total_cmp);
    let k = dists.len();
    let idx = ((beta * (k as f64 + 1.0) - 1e-9).ceil() as usize).clamp(1, k);
    Ok(uni_from_distortion(alpha, dists[idx - 1], p))
}

/// `rho_tau(u) = u (tau - 1[u < 0])`.
pub fn pinball(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// Lower and upper per-pixel quantile regressors for `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileModel {
    pub lower: MaskerModel,
    pub upper: MaskerModel,
    pub levels: (f64, f64),
}

#[derive(Serialize, Deserialize)]
struct QuantileFile {
    levels: [f64; 2],
    lower: serde_json::Value,
    upper: serde_json::Value,
}

impl QuantileModel {
    /// Per-pixel `(lower, upper)` predictions, swapped where they cross.
    pub fn intervals(&self, x: &Image, y_hat: &Image) -> Result<Vec<(f64, f64)>> {
        let f = extract_features(&align_input(x, y_hat), y_hat)?;
        let lo = self.lower.predict_plane(&f);
        let hi = self.upper.predict_plane(&f);
        Ok(lo
            .into_iter()
            .zip(hi)
            .map(|(a, b)| if a <= b { (a, b) } else { (b, a) })
            .collect())
    }

    pub fn widths(&self, x: &Image, y_hat: &Image) -> Result<Vec<f64>> {
        Ok(self.intervals(x, y_hat)?.into_iter().map(|(a, b)| b - a).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = QuantileFile {
            levels: [self.levels.0, self.levels.1],
            lower: self.lower.to_value()?,
            upper: self.upper.to_value()?,
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: QuantileFile = serde_json::from_str(text)?;
        Ok(QuantileModel {
            lower: MaskerModel::from_value(file.lower)?,
            upper: MaskerModel::from_value(file.upper)?,
            levels: (file.levels[0], file.levels[1]),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedQuantile {
    pub model: QuantileModel,
    pub lower_trace: Vec<f64>,
    pub upper_trace: Vec<f64>,
}

/// Fits both heads with the pinball loss summed over channels. The two heads
/// use independent seeded streams derived from `cfg.seed`.
pub fn train_quantile(train: &TripletDataset, levels: (f64, f64), cfg: &TrainConfig) -> Result<TrainedQuantile> {
    cfg.validate()?;
    for tau in [levels.0, levels.1] {
        if !(0.0 < tau && tau < 1.0) {
            return Err(invalid(format!("quantile level {tau} outside (0, 1)")));
        }
    }
    if train.is_empty() {
        return Err(Error::Empty { what: "train split" });
    }
    let data = prepare(train, false)?;
    let fit = |tau: f64, stream: u64| -> Result<(MaskerModel, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        let mut model = MaskerModel::init(cfg.model, 0.5, &mut rng).with_norm(cfg.feature_norm(&data));
        let trace = sgd(&mut model, &data, cfg, &mut rng, |raw, ys| {
            let mut loss = 0.0;
            let mut grad = 0.0;
            for &y in ys {
                let u = y - raw;
                loss += pinball(u, tau);
                grad -= if u < 0.0 { tau - 1.0 } else { tau };
            }
            (loss, grad)
        })?;
        Ok((model, trace))
    };
    let (lower, lower_trace) = fit(levels.0, 1)?;
    let (upper, upper_trace) = fit(levels.1, 2)?;
    Ok(TrainedQuantile {
        model: QuantileModel { lower, upper, levels },
        lower_trace,
        upper_trace,
    })
}

/// `1 - w / max(max w, 1e-12)`: the widest interval is fully masked.
pub fn mask_from_widths(widths: &[f64]) -> Vec<f64> {
    let top = widths.iter().copied().fold(0.0, f64::max).max(1e-12);
    widths.iter().map(|w| (1.0 - w / top).clamp(0.0, 1.0)).collect()
}

pub fn quantile_heuristic_mask(model: &QuantileModel, x: &Image, y_hat: &Image) -> Result<Mask> {
    let widths = model.widths(x, y_hat)?;
    Mask::from_plane(y_hat.shape(), &mask_from_widths(&widths))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Split, TripletRecord};
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::Rng;

    fn record(id: usize, y: Vec<f64>, y_hat: Vec<f64>) -> TripletRecord {
        let s = Shape::flat(y.len());
        let yh = Image::new(s, y_hat).unwrap();
        TripletRecord::new(format!("r{id:04}"), yh.clone(), yh, Image::new(s, y).unwrap(), Split::Calibration).unwrap()
    }

    #[test]
    fn uni_order_statistic_example() {
        let ds: TripletDataset = (1..=10)
            .map(|i| record(i, vec![i as f64 / 10.0], vec![0.0]))
            .collect();
        let mu = uni_scalar(&ds, &DistortionSpec::L1, 0.45, 0.9).unwrap();
        assert!((mu - 0.45).abs() < 1e-12);
    }

    #[test]
    fn uni_scaling_examples() {
        // squared distortion 4 from four unit errors
        let ds: TripletDataset = std::iter::once(record(0, vec![1.0; 4], vec![0.0; 4])).collect();
        let mu = uni_scalar(&ds, &DistortionSpec::L2, 1.0, 0.9).unwrap();
        assert!((mu - 0.5).abs() < 1e-12);
        assert_eq!(uni_scalar(&ds, &DistortionSpec::L2, 10.0, 0.9).unwrap(), 1.0);
        assert!(uni_scalar(&ds, &DistortionSpec::Ssim, 0.1, 0.9).is_err());
        assert!(matches!(
            uni_scalar(&TripletDataset::default(), &DistortionSpec::L1, 0.1, 0.9),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn pinball_values() {
        assert_eq!(pinball(2.0, 0.9), 1.8);
        assert!((pinball(-2.0, 0.9) - 0.2).abs() < 1e-15);
        assert_eq!(pinball(0.0, 0.3), 0.0);
    }

    #[test]
    fn width_mask_examples() {
        assert_eq!(mask_from_widths(&[0.0, 0.0]), vec![1.0, 1.0]);
        let m = mask_from_widths(&[0.2, 0.4]);
        assert!((m[0] - 0.5).abs() < 1e-12 && m[1] == 0.0);
        assert_eq!(mask_from_widths(&[0.3; 5]), vec![0.0; 5]);
    }

    fn bias_only_set(n: usize, pixels: usize, seed: u64, draw: impl Fn(&mut ChaCha8Rng) -> f64) -> TripletDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let y = (0..pixels).map(|_| draw(&mut rng)).collect();
                let mut r = record(i, y, vec![0.0; pixels]);
                r.split = Split::Train;
                r
            })
            .collect()
    }

    #[test]
    fn constant_target_heads_meet() {
        let ds = bias_only_set(50, 16, 1, |_| 0.3);
        let cfg = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        let q = train_quantile(&ds, DEFAULT_LEVELS, &cfg).unwrap().model;
        let r = &ds.records()[0];
        for (lo, hi) in q.intervals(&r.x, &r.y_hat).unwrap() {
            assert!((lo - 0.3).abs() < 1e-2 && (hi - 0.3).abs() < 1e-2, "{lo} {hi}");
        }
    }

    #[test]
    fn uniform_targets_recover_quantiles() {
        let ds = bias_only_set(100, 64, 2, |r| r.random::<f64>());
        let cfg = TrainConfig {
            epochs: 300,
            seed: 3,
            ..TrainConfig::default()
        };
        let q = train_quantile(&ds, DEFAULT_LEVELS, &cfg).unwrap().model;
        let r = &ds.records()[0];
        let (lo, hi) = q.intervals(&r.x, &r.y_hat).unwrap()[0];
        assert!((lo - 0.05).abs() < 2e-2, "lower {lo}");
        assert!((hi - 0.95).abs() < 2e-2, "upper {hi}");
    }

    #[test]
    fn quantile_model_json_round_trip() {
        let ds = bias_only_set(5, 4, 4, |r| r.random::<f64>());
        let cfg = TrainConfig {
            epochs: 2,
            model: crate::masker::ModelKind::Mlp { hidden: 2 },
            ..TrainConfig::default()
        };
        let q = train_quantile(&ds, DEFAULT_LEVELS, &cfg).unwrap().model;
        assert_eq!(QuantileModel::from_json(&q.to_json().unwrap()).unwrap(), q);
    }

    proptest! {
        #[test]
        fn width_masks_ignore_rescaling(w in prop::collection::vec(0.0f64..1.0, 1..20), s in 0.01f64..100.0) {
            prop_assume!(w.iter().any(|&v| v > 1e-6));
            let a = mask_from_widths(&w);
            let scaled: Vec<f64> = w.iter().map(|v| v * s).collect();
            let b = mask_from_widths(&scaled);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn uni_scalar_meets_beta_fraction(
            errs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..40),
            alpha in 0.01f64..1.0,
            beta in 0.5f64..0.99,
            p in prop::sample::select(vec![1.0, 2.0]),
        ) {
            let ds: TripletDataset = errs.iter().enumerate().map(|(i, e)| record(i, e.clone(), vec![0.0; 4])).collect();
            let d = DistortionSpec::pnorm(p).unwrap();
            let mu = uni_scalar(&ds, &d, alpha, beta).unwrap();
            let ok = ds.iter().filter(|r| d.distance(&r.y.scale(mu), &r.y_hat.scale(mu)).unwrap() <= alpha * (1.0 + 1e-9)).count();
            let k = ds.len() as f64;
            let need = ((beta * (k + 1.0) - 1e-9).ceil()).min(k);
            prop_assert!(ok as f64 >= need);
            prop_assert!(ok as f64 >= beta * k);
        }
    }
}

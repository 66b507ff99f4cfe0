//! The Opt oracle: a per-instance mask computed with access to `y`.
//!
//! Minimizes `||m - 1||^2 + mu * d(m*y, m*y_hat)` with Adam, projecting onto
//! `[0, 1]^n` after each step and stopping at the first iterate whose masked
//! distortion is at most the target. The dual weight grows geometrically by
//! `mu_growth` per step so that every positive target is eventually reachable;
//! with `mu_growth = 1` the weight stays fixed.

use serde::{Deserialize, Serialize};

use crate::distortion::{masked_grad_into, masked_raw, DistortionSpec};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub mu: f64,
    pub mu_growth: f64,
    pub step_size: f64,
    pub max_iters: usize,
    pub target_alpha: f64,
    pub moment_decay_1: f64,
    pub moment_decay_2: f64,
    pub epsilon_adam: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            mu: 2.0,
            mu_growth: 1.002,
            step_size: 0.01,
            max_iters: 10_000,
            target_alpha: 0.0,
            moment_decay_1: 0.9,
            moment_decay_2: 0.999,
            epsilon_adam: 1e-8,
        }
    }
}

impl OracleConfig {
    pub fn with_target(target_alpha: f64) -> Self {
        Self {
            target_alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(invalid("oracle mu must be positive"));
        }
        if !(self.mu_growth >= 1.0) {
            return Err(invalid("oracle mu_growth must be >= 1"));
        }
        if !(self.step_size > 0.0) {
            return Err(invalid("oracle step size must be positive"));
        }
        for b in [self.moment_decay_1, self.moment_decay_2] {
            if !(0.0 < b && b < 1.0) {
                return Err(invalid("Adam moment decays must lie in (0, 1)"));
            }
        }
        if !(self.epsilon_adam > 0.0) {
            return Err(invalid("Adam epsilon must be positive"));
        }
        if !(self.target_alpha >= 0.0) {
            return Err(invalid("target alpha must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub mask: Mask,
    pub iterations: usize,
    pub distortion: f64,
    pub final_mu: f64,
}

pub fn optimize_mask(y: &Image, y_hat: &Image, d: &DistortionSpec, cfg: &OracleConfig) -> Result<OracleOutcome> {
    cfg.validate()?;
    y.shape().check_same(&y_hat.shape())?;
    let shape = y.shape();
    let (yv, hv) = (y.values(), y_hat.values());
    let n = yv.len();
    let alpha = cfg.target_alpha;

    let mut m = vec![1.0; n];
    let mut dist = masked_raw(d, &m, yv, hv, shape);
    if dist <= alpha {
        return Ok(OracleOutcome {
            mask: Mask::ones(shape),
            iterations: 0,
            distortion: dist,
            final_mu: cfg.mu,
        });
    }

    let (b1, b2) = (cfg.moment_decay_1, cfg.moment_decay_2);
    let mut first = vec![0.0; n];
    let mut second = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut mu = cfg.mu;
    let mut best = (m.clone(), dist);
    let (mut pow1, mut pow2) = (1.0, 1.0);

    for t in 1..=cfg.max_iters {
        masked_grad_into(d, &m, yv, hv, shape, &mut grad);
        pow1 *= b1;
        pow2 *= b2;
        for i in 0..n {
            let g = 2.0 * (m[i] - 1.0) + mu * grad[i];
            first[i] = b1 * first[i] + (1.0 - b1) * g;
            second[i] = b2 * second[i] + (1.0 - b2) * g * g;
            let mh = first[i] / (1.0 - pow1);
            let vh = second[i] / (1.0 - pow2);
            m[i] = (m[i] - cfg.step_size * mh / (vh.sqrt() + cfg.epsilon_adam)).clamp(0.0, 1.0);
        }
        debug_assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        mu *= cfg.mu_growth;
        dist = masked_raw(d, &m, yv, hv, shape);
        if dist <= alpha {
            return Ok(OracleOutcome {
                mask: Mask::new(shape, m)?,
                iterations: t,
                distortion: dist,
                final_mu: mu,
            });
        }
        if dist < best.1 {
            best = (m.clone(), dist);
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iters,
        target: alpha,
        best_distortion: best.1,
        best: Box::new(Mask::new(shape, best.0)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimal::{closed_form_mask, ErrorProfile};
    use crate::tensor::Shape;

    fn img(v: &[f64]) -> Image {
        Image::new(Shape::flat(v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn already_within_target_takes_no_steps() {
        let y = img(&[0.5, 0.6]);
        let yh = img(&[0.5, 0.5]);
        let out = optimize_mask(&y, &yh, &DistortionSpec::L2, &OracleConfig::with_target(0.1)).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.mask.values(), &[1.0, 1.0]);
    }

    #[test]
    fn perfect_prediction_keeps_everything() {
        let y = img(&[0.2, 0.9, 0.4]);
        let out = optimize_mask(&y, &y, &DistortionSpec::L1, &OracleConfig::with_target(0.0)).unwrap();
        assert_eq!(out.mask.values(), &[1.0; 3]);
    }

    #[test]
    fn two_pixel_instance_tracks_closed_form() {
        // squared errors [0.25, 1]
        let y = img(&[0.5, 1.0]);
        let yh = img(&[0.0, 0.0]);
        let alpha = 0.01;
        let out = optimize_mask(&y, &yh, &DistortionSpec::L2, &OracleConfig::with_target(alpha)).unwrap();
        let cf = closed_form_mask(&ErrorProfile::new(vec![0.25, 1.0], 2.0, alpha).unwrap()).unwrap();
        for (a, b) in out.mask.values().iter().zip(cf.mask.values()) {
            assert!((a - b).abs() < 2e-2, "{a} vs {b}");
        }
        assert!(out.distortion <= alpha);
    }

    #[test]
    fn fixed_mu_can_fail_to_converge() {
        let y = img(&[1.0, 1.0]);
        let yh = img(&[0.0, 0.0]);
        let cfg = OracleConfig {
            mu_growth: 1.0,
            max_iters: 500,
            target_alpha: 0.01,
            ..OracleConfig::default()
        };
        match optimize_mask(&y, &yh, &DistortionSpec::L2, &cfg) {
            Err(Error::NonConvergence { best, best_distortion, .. }) => {
                assert!(best_distortion > 0.01);
                assert_eq!(best.len(), 2);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_config() {
        let y = img(&[0.0]);
        let cfg = OracleConfig {
            step_size: 0.0,
            ..OracleConfig::default()
        };
        assert!(optimize_mask(&y, &y, &DistortionSpec::L2, &cfg).is_err());
    }
}

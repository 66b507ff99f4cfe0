//! Closed-form optimal masks for p-norm distortions.
//!
//! Given per-pixel expected errors `d_i = E|y_i - y_hat_i|^p`, the mask
//! maximizing `||m||_1` subject to `sum m_i^p d_i <= alpha` and `0 <= m <= 1` is
//!
//! * for `p > 1`: `m_i = min(1, c * q_i)` with `q_i = d_i^(-1/(p-1))` and the
//!   scale `c` fixed by the budget. When no coordinate saturates,
//!   `c = (alpha / sum_j q_j)^(1/p)`. Saturated coordinates are clamped to 1,
//!   their error is charged to the budget, and the rest is re-solved.
//! * for `p = 1`: binary, keeping the pixels with the smallest errors while
//!   their cumulative error stays within `alpha`.

use crate::error::{invalid, Error, Result};
use crate::tensor::{Mask, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorProfile {
    errors: Vec<f64>,
    shape: Shape,
    p: f64,
    alpha: f64,
}

impl ErrorProfile {
    pub fn new(errors: Vec<f64>, p: f64, alpha: f64) -> Result<Self> {
        let shape = Shape::flat(errors.len());
        Self::with_shape(errors, shape, p, alpha)
    }

    /// A profile whose resulting masks carry `shape`.
    pub fn with_shape(errors: Vec<f64>, shape: Shape, p: f64, alpha: f64) -> Result<Self> {
        if shape.len() != errors.len() {
            return Err(invalid(format!(
                "{} errors do not fill shape {shape}",
                errors.len()
            )));
        }
        if !(p.is_finite() && p >= 1.0) {
            return Err(invalid(format!("p must be >= 1, got {p}")));
        }
        if !alpha.is_finite() {
            return Err(invalid("alpha must be finite"));
        }
        if let Some(bad) = errors.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(invalid(format!("per-pixel error {bad} is not a finite nonnegative value")));
        }
        if !errors.iter().any(|&d| d > 0.0) {
            return Err(invalid("error profile has no positive entry"));
        }
        Ok(Self {
            errors,
            shape,
            p,
            alpha,
        })
    }

    pub fn errors(&self) -> &[f64] {
        &self.errors
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::with_shape(self.errors.clone(), self.shape, self.p, alpha)
    }

    /// `sum_i d_i`: the constraint value of the all-ones mask.
    pub fn total(&self) -> f64 {
        self.errors.iter().sum()
    }

    /// `q_i = d_i^(-1/(p-1))`; infinite where `d_i = 0`.
    pub fn weights(&self) -> Vec<f64> {
        let e = -1.0 / (self.p - 1.0);
        self.errors
            .iter()
            .map(|&d| if d > 0.0 { d.powf(e) } else { f64::INFINITY })
            .collect()
    }

    /// Largest α for which the unclamped formula stays inside the box:
    /// `(sum_j q_j) / (max_i q_i)^p`. Only meaningful with all `d_i > 0`.
    pub fn unclamped_alpha_limit(&self) -> f64 {
        let q = self.weights();
        let sum: f64 = q.iter().sum();
        let max = q.iter().cloned().fold(0.0, f64::max);
        sum / max.powf(self.p)
    }

    /// `sum_i m_i^p d_i`.
    pub fn constraint(&self, m: &[f64]) -> f64 {
        m.iter()
            .zip(&self.errors)
            .map(|(mi, d)| mi.powf(self.p) * d)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalMask {
    pub mask: Mask,
    /// α covers the unmasked error; no masking was needed.
    pub slack: bool,
    /// Coordinates pinned at 1, including zero-error pixels.
    pub saturated: usize,
}

/// The optimal continuous mask for `p > 1`.
pub fn closed_form_mask(profile: &ErrorProfile) -> Result<OptimalMask> {
    let p = profile.p;
    if p <= 1.0 {
        return Err(invalid("closed-form continuous mask needs p > 1; use binary_mask for p = 1"));
    }
    let alpha = profile.alpha;
    if alpha <= 0.0 {
        return Err(invalid(format!("alpha must be positive, got {alpha}")));
    }
    let d = &profile.errors;
    let n = d.len();
    if alpha >= profile.total() {
        return Ok(OptimalMask {
            mask: Mask::ones(profile.shape),
            slack: true,
            saturated: n,
        });
    }

    let q = profile.weights();
    let mut m = vec![1.0; n];
    let mut free: Vec<usize> = (0..n).filter(|&i| d[i] > 0.0).collect();
    let mut budget = alpha;
    loop {
        let sum_q: f64 = free.iter().map(|&i| q[i]).sum();
        let scale = (budget / sum_q).powf(1.0 / p);
        let (over, under): (Vec<usize>, Vec<usize>) =
            free.iter().partition(|&&i| scale * q[i] > 1.0);
        if over.is_empty() {
            for &i in &free {
                m[i] = scale * q[i];
            }
            break;
        }
        // Saturated coordinates stay at 1 in the final solution: the true
        // scale is never below the one computed here.
        budget -= over.iter().map(|&i| d[i]).sum::<f64>();
        free = under;
        debug_assert!(budget > 0.0 && !free.is_empty());
    }
    let saturated = m.iter().filter(|&&v| v >= 1.0).count();
    Ok(OptimalMask {
        mask: Mask::new(profile.shape, m)?,
        slack: false,
        saturated,
    })
}

/// The optimal binary mask for `p = 1`.
///
/// Pixels are visited in ascending error (ties by index) and kept while the
/// cumulative kept error is at most α.
pub fn binary_mask(profile: &ErrorProfile) -> Result<Mask> {
    if profile.p != 1.0 {
        return Err(invalid(format!("binary mask needs p = 1, got {}", profile.p)));
    }
    let n = profile.errors.len();
    let mut m = vec![0.0; n];
    if profile.alpha <= 0.0 {
        return Mask::new(profile.shape, m);
    }
    let d = &profile.errors;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    // cumulative sums are compared with a few ulps of slack so that exact
    // decimal budgets such as 0.1 + 0.2 <= 0.3 hold
    let limit = profile.alpha * (1.0 + 8.0 * f64::EPSILON);
    let mut used = 0.0;
    for i in order {
        if used + d[i] > limit {
            break;
        }
        used += d[i];
        m[i] = 1.0;
    }
    Mask::new(profile.shape, m)
}

/// Dispatches to [`closed_form_mask`] for `p > 1` and [`binary_mask`] for `p = 1`.
pub fn optimal_mask(profile: &ErrorProfile) -> Result<OptimalMask> {
    if profile.p > 1.0 {
        closed_form_mask(profile)
    } else {
        let mask = binary_mask(profile)?;
        let saturated = mask.values().iter().filter(|&&v| v == 1.0).count();
        Ok(OptimalMask {
            slack: saturated == mask.len(),
            mask,
            saturated,
        })
    }
}

/// `sum_i m_i^-(p-1)`, proportional to the expected distortion for an
/// optimal mask.
pub fn uncertainty_from_mask(m: &Mask, p: f64) -> Result<f64> {
    if !(p.is_finite() && p > 1.0) {
        return Err(invalid(format!("uncertainty needs p > 1, got {p}")));
    }
    if m.values().iter().any(|&v| v <= 0.0) {
        return Err(Error::ZeroMaskEntry);
    }
    Ok(m.values().iter().map(|v| v.powf(-(p - 1.0))).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pixel_closed_form() {
        let prof = ErrorProfile::new(vec![1.0, 4.0], 2.0, 0.05).unwrap();
        let out = closed_form_mask(&prof).unwrap();
        let m = out.mask.values();
        assert!((m[0] - 0.2).abs() < 1e-12);
        assert!((m[1] - 0.05).abs() < 1e-12);
        assert!((prof.constraint(m) - 0.05).abs() < 1e-15);
        assert!(!out.slack);
    }

    #[test]
    fn uniform_profile_gives_uniform_mask() {
        let prof = ErrorProfile::new(vec![0.3; 9], 2.0, 0.01).unwrap();
        let m = closed_form_mask(&prof).unwrap().mask;
        let first = m.values()[0];
        assert!(m.values().iter().all(|v| (v - first).abs() < 1e-14));
    }

    #[test]
    fn large_alpha_returns_ones() {
        let prof = ErrorProfile::new(vec![0.1, 0.2], 2.0, 0.5).unwrap();
        let out = closed_form_mask(&prof).unwrap();
        assert!(out.slack);
        assert_eq!(out.mask.values(), &[1.0, 1.0]);
    }

    #[test]
    fn rejects_nonpositive_alpha_and_p_one() {
        assert!(closed_form_mask(&ErrorProfile::new(vec![1.0], 2.0, 0.0).unwrap()).is_err());
        assert!(closed_form_mask(&ErrorProfile::new(vec![1.0], 1.0, 0.5).unwrap()).is_err());
        assert!(ErrorProfile::new(vec![0.0, 0.0], 2.0, 0.5).is_err());
        assert!(ErrorProfile::new(vec![-1.0, 1.0], 2.0, 0.5).is_err());
    }

    #[test]
    fn zero_error_pixels_stay_unmasked() {
        let prof = ErrorProfile::new(vec![0.0, 1.0, 4.0], 2.0, 0.05).unwrap();
        let m = closed_form_mask(&prof).unwrap().mask;
        assert_eq!(m.values()[0], 1.0);
        assert!((m.values()[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn active_set_clamps_and_spends_remaining_budget() {
        // q = [100, 1, 1]; the unclamped scale pushes pixel 0 above 1.
        let prof = ErrorProfile::new(vec![0.01, 1.0, 1.0], 2.0, 0.5).unwrap();
        let out = closed_form_mask(&prof).unwrap();
        let m = out.mask.values();
        assert_eq!(m[0], 1.0);
        assert_eq!(out.saturated, 1);
        // remaining budget 0.49 split evenly: 2 m^2 = 0.49
        assert!((m[1] - (0.245f64).sqrt()).abs() < 1e-12);
        assert!((prof.constraint(m) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn binary_examples() {
        let prof = ErrorProfile::new(vec![0.1, 0.2, 0.3], 1.0, 0.3).unwrap();
        assert_eq!(binary_mask(&prof).unwrap().values(), &[1.0, 1.0, 0.0]);
        let prof = ErrorProfile::new(vec![0.5], 1.0, 1.0).unwrap();
        assert_eq!(binary_mask(&prof).unwrap().values(), &[1.0]);
        let prof = ErrorProfile::new(vec![0.5, 0.0], 1.0, -1.0).unwrap();
        assert_eq!(binary_mask(&prof).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn binary_ties_break_by_index() {
        let prof = ErrorProfile::new(vec![0.2, 0.1, 0.2, 0.2], 1.0, 0.35).unwrap();
        assert_eq!(binary_mask(&prof).unwrap().values(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn uncertainty_examples() {
        assert_eq!(uncertainty_from_mask(&Mask::ones(Shape::flat(7)), 3.0).unwrap(), 7.0);
        let m = Mask::new(Shape::flat(2), vec![0.2, 0.05]).unwrap();
        assert!((uncertainty_from_mask(&m, 2.0).unwrap() - 25.0).abs() < 1e-12);
        let z = Mask::new(Shape::flat(2), vec![0.2, 0.0]).unwrap();
        assert!(matches!(uncertainty_from_mask(&z, 2.0), Err(Error::ZeroMaskEntry)));
        assert!(uncertainty_from_mask(&m, 1.0).is_err());
    }

    #[test]
    fn monotone_in_alpha_including_clamped_regime() {
        let prof = ErrorProfile::new(vec![0.01, 0.3, 0.9, 0.05, 0.5], 1.5, 0.01).unwrap();
        let mut prev = vec![0.0; 5];
        for k in 1..200 {
            let alpha = k as f64 * 0.01;
            let m = closed_form_mask(&prof.with_alpha(alpha).unwrap()).unwrap().mask;
            for (a, b) in prev.iter().zip(m.values()) {
                assert!(*b >= a - 1e-12);
            }
            prev = m.values().to_vec();
        }
    }
}

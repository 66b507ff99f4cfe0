//! Conformal calibration of heuristic masks.
//!
//! A heuristic mask `m_theta` is turned into `m_lambda(i) = lambda / (eps + 1 - m_theta(i))`,
//! clipped to `[0, 1]`. For every calibration record the largest feasible
//! `lambda_k` (masked distortion at most α) is found by bisection; the global
//! `lambda` is the order statistic at index `floor((1 - beta)(K + 1))` of the
//! sorted `lambda_k`, so that at least a β fraction of exchangeable samples
//! satisfy the constraint.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{uni_per_sample, uni_scalar};
use crate::dataset::TripletDataset;
use crate::distortion::{masked_raw, DistortionSpec};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Image, Mask, Shape};

pub const DEFAULT_EPSILON_DENOMINATOR: f64 = 1e-6;
pub const DEFAULT_BISECTION_EPS: f64 = 1e-3;
pub const DEFAULT_GRID_POINTS: usize = 1024;

/// `clip(lambda / (epsilon + 1 - m_theta), 0, 1)` element-wise.
pub fn calibrated_mask(m_theta: &Mask, lambda: f64, epsilon: f64) -> Mask {
    let mut out = vec![0.0; m_theta.len()];
    calibrated_into(m_theta.values(), lambda, epsilon, &mut out);
    Mask::new(m_theta.shape(), out).expect("calibrated values are clipped to [0, 1]")
}

fn calibrated_into(m_theta: &[f64], lambda: f64, epsilon: f64, out: &mut [f64]) {
    for (o, &m) in out.iter_mut().zip(m_theta) {
        *o = if lambda <= 0.0 {
            0.0
        } else {
            let denom = epsilon + 1.0 - m;
            if denom <= 0.0 {
                1.0
            } else {
                (lambda / denom).clamp(0.0, 1.0)
            }
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchOptions {
    /// Bisection resolution; the search interval is `[eps, 1 / eps]`.
    pub eps: f64,
    pub epsilon_denominator: f64,
    /// Use the grid scan for distortions that are not monotone in the mask.
    pub scan_fallback: bool,
    pub grid_points: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_BISECTION_EPS,
            epsilon_denominator: DEFAULT_EPSILON_DENOMINATOR,
            scan_fallback: true,
            grid_points: DEFAULT_GRID_POINTS,
        }
    }
}

impl SearchOptions {
    fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(invalid("bisection eps must lie in (0, 1)"));
        }
        if !(self.epsilon_denominator > 0.0) {
            return Err(invalid("denominator epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSearch {
    pub lambda: f64,
    /// The constraint fails even at the smallest λ.
    pub infeasible: bool,
    pub evaluations: usize,
}

struct Predicate<'a> {
    m_theta: &'a [f64],
    y: &'a [f64],
    y_hat: &'a [f64],
    shape: Shape,
    d: DistortionSpec,
    alpha: f64,
    epsilon: f64,
    scratch: Vec<f64>,
    evaluations: usize,
}

impl Predicate<'_> {
    fn holds(&mut self, lambda: f64) -> bool {
        self.evaluations += 1;
        calibrated_into(self.m_theta, lambda, self.epsilon, &mut self.scratch);
        masked_raw(&self.d, &self.scratch, self.y, self.y_hat, self.shape) <= self.alpha
    }
}

fn predicate<'a>(
    m_theta: &'a Mask,
    y: &'a Image,
    y_hat: &'a Image,
    d: &DistortionSpec,
    alpha: f64,
    epsilon: f64,
) -> Result<Predicate<'a>> {
    m_theta.shape().check_same(&y.shape())?;
    y.shape().check_same(&y_hat.shape())?;
    if let DistortionSpec::Ssim = d {
        // surfaces the window-size error before the search starts
        d.distance(y, y_hat)?;
    }
    Ok(Predicate {
        m_theta: m_theta.values(),
        y: y.values(),
        y_hat: y_hat.values(),
        shape: y.shape(),
        d: *d,
        alpha,
        epsilon,
        scratch: vec![0.0; y.len()],
        evaluations: 0,
    })
}

/// Largest λ in `[eps, 1/eps]` (within `eps`) whose calibrated mask keeps the
/// masked distortion at most α.
///
/// Non-monotone distortions are routed to [`scan_lambda`] when
/// `opts.scan_fallback` is set, and rejected otherwise.
pub fn find_lambda(
    m_theta: &Mask,
    y: &Image,
    y_hat: &Image,
    d: &DistortionSpec,
    alpha: f64,
    opts: &SearchOptions,
) -> Result<LambdaSearch> {
    opts.validate()?;
    if !d.monotone_in_mask() {
        return if opts.scan_fallback {
            scan_lambda(m_theta, y, y_hat, d, alpha, opts)
        } else {
            Err(Error::NonMonotone(d.id()))
        };
    }
    let mut pred = predicate(m_theta, y, y_hat, d, alpha, opts.epsilon_denominator)?;
    let (mut lo, mut hi) = (opts.eps, 1.0 / opts.eps);
    if pred.holds(hi) {
        return Ok(LambdaSearch {
            lambda: hi,
            infeasible: false,
            evaluations: pred.evaluations,
        });
    }
    if !pred.holds(lo) {
        return Ok(LambdaSearch {
            lambda: lo,
            infeasible: true,
            evaluations: pred.evaluations,
        });
    }
    while hi - lo > opts.eps {
        let mid = 0.5 * (lo + hi);
        if pred.holds(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(LambdaSearch {
        lambda: lo,
        infeasible: false,
        evaluations: pred.evaluations,
    })
}

/// Geometric grid over `[eps, 1/eps]`; returns the largest grid λ such that
/// the predicate holds there and at every smaller grid point.
pub fn scan_lambda(
    m_theta: &Mask,
    y: &Image,
    y_hat: &Image,
    d: &DistortionSpec,
    alpha: f64,
    opts: &SearchOptions,
) -> Result<LambdaSearch> {
    opts.validate()?;
    if opts.grid_points < 2 {
        return Err(invalid("scan needs at least 2 grid points"));
    }
    let mut pred = predicate(m_theta, y, y_hat, d, alpha, opts.epsilon_denominator)?;
    let grid = lambda_grid(opts.eps, opts.grid_points);
    let mut last = None;
    for &lambda in &grid {
        if !pred.holds(lambda) {
            break;
        }
        last = Some(lambda);
    }
    Ok(match last {
        Some(lambda) => LambdaSearch {
            lambda,
            infeasible: false,
            evaluations: pred.evaluations,
        },
        None => LambdaSearch {
            lambda: opts.eps,
            infeasible: true,
            evaluations: pred.evaluations,
        },
    })
}

pub fn lambda_grid(eps: f64, points: usize) -> Vec<f64> {
    let (lo, hi) = (eps.ln(), (1.0 / eps).ln());
    (0..points)
        .map(|j| {
            if j == points - 1 {
                1.0 / eps
            } else if j == 0 {
                eps
            } else {
                (lo + (hi - lo) * j as f64 / (points - 1) as f64).exp()
            }
        })
        .collect()
}

/// Source of the heuristic mask fed into calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heuristic {
    /// The trained masking model's prediction, attached to each record.
    Masker,
    /// The interval-width mask of the quantile baseline, attached to each record.
    Quantile,
    /// A single uniform scalar chosen by the UNI rule.
    Uni,
    /// Uniform uncertainty: `m_theta = 0`, so the calibrated mask is the
    /// constant `lambda / (1 + eps)`.
    Ones,
}

impl Heuristic {
    pub fn as_str(self) -> &'static str {
        match self {
            Heuristic::Masker => "masker",
            Heuristic::Quantile => "quantile",
            Heuristic::Uni => "uni",
            Heuristic::Ones => "ones",
        }
    }

    pub fn needs_attached_mask(self) -> bool {
        matches!(self, Heuristic::Masker | Heuristic::Quantile)
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Heuristic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masker" | "ours" => Ok(Heuristic::Masker),
            "quantile" => Ok(Heuristic::Quantile),
            "uni" => Ok(Heuristic::Uni),
            "ones" => Ok(Heuristic::Ones),
            other => Err(invalid(format!("unknown heuristic {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub lambda: f64,
    /// Per-record λ_k in ascending record-id order.
    pub lambdas_per_sample: Vec<f64>,
    pub record_ids: Vec<String>,
    pub alpha: f64,
    pub beta: f64,
    pub distortion_id: String,
    pub heuristic: Heuristic,
    pub epsilon_denominator: f64,
    pub bisection_eps: f64,
    pub sample_count: usize,
    /// 1-based position of `lambda` among the sorted `lambdas_per_sample`.
    pub quantile_index: usize,
    pub infeasible_count: usize,
    pub search: String,
}

impl CalibrationResult {
    pub fn distortion(&self) -> Result<DistortionSpec> {
        self.distortion_id.parse()
    }

    /// The calibrated mask for one record. `m_theta` is required for the
    /// masker and quantile heuristics and ignored otherwise.
    pub fn apply(&self, m_theta: Option<&Mask>, shape: Shape) -> Result<Mask> {
        match self.heuristic {
            Heuristic::Uni => Ok(Mask::filled(shape, self.lambda)),
            Heuristic::Ones => Ok(calibrated_mask(&Mask::zeros(shape), self.lambda, self.epsilon_denominator)),
            Heuristic::Masker | Heuristic::Quantile => {
                let m = m_theta.ok_or_else(|| invalid(format!("heuristic {} needs a mask", self.heuristic)))?;
                m.shape().check_same(&shape)?;
                Ok(calibrated_mask(m, self.lambda, self.epsilon_denominator))
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// 1-based conservative index `floor((1 - beta)(K + 1))`, clamped to `[1, K]`.
pub fn lower_quantile_index(beta: f64, k: usize) -> usize {
    let raw = ((1.0 - beta) * (k as f64 + 1.0) + 1e-9).floor();
    (raw.max(1.0) as usize).min(k.max(1))
}

fn check_levels(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(invalid(format!("alpha must be finite and nonnegative, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

pub fn calibrate(
    calibration: &TripletDataset,
    heuristic: Heuristic,
    d: &DistortionSpec,
    alpha: f64,
    beta: f64,
    opts: &SearchOptions,
) -> Result<CalibrationResult> {
    check_levels(alpha, beta)?;
    opts.validate()?;
    if calibration.is_empty() {
        return Err(Error::Empty {
            what: "calibration split",
        });
    }
    let records = calibration.records();
    let k = records.len();

    if heuristic == Heuristic::Uni {
        let mu = uni_scalar(calibration, d, alpha, beta)?;
        let per = uni_per_sample(calibration, d, alpha)?;
        let mut sorted = per.clone();
        sorted.sort_by(f64::total_cmp);
        let quantile_index = sorted.iter().position(|&v| v >= mu).map_or(k, |i| i + 1);
        return Ok(CalibrationResult {
            lambda: mu,
            lambdas_per_sample: per,
            record_ids: records.iter().map(|r| r.id.clone()).collect(),
            alpha,
            beta,
            distortion_id: d.id(),
            heuristic,
            epsilon_denominator: opts.epsilon_denominator,
            bisection_eps: opts.eps,
            sample_count: k,
            quantile_index,
            infeasible_count: 0,
            search: "uni".into(),
        });
    }

    let searches: Vec<LambdaSearch> = records
        .par_iter()
        .map(|r| {
            let zeros;
            let m = match heuristic {
                Heuristic::Ones => {
                    zeros = Mask::zeros(r.y.shape());
                    &zeros
                }
                _ => r
                    .heuristic_mask
                    .as_ref()
                    .ok_or_else(|| invalid(format!("record {} has no heuristic mask", r.id)))?,
            };
            find_lambda(m, &r.y, &r.y_hat, d, alpha, opts)
        })
        .collect::<Result<_>>()?;

    let infeasible_count = searches.iter().filter(|s| s.infeasible).count();
    if infeasible_count > 0 {
        log::warn!("{infeasible_count} of {k} calibration records are infeasible at the smallest lambda");
    }
    let per: Vec<f64> = searches.iter().map(|s| s.lambda).collect();
    let mut sorted = per.clone();
    sorted.sort_by(f64::total_cmp);
    let quantile_index = lower_quantile_index(beta, k);
    let search = if d.monotone_in_mask() { "bisection" } else { "scan" };
    Ok(CalibrationResult {
        lambda: sorted[quantile_index - 1],
        lambdas_per_sample: per,
        record_ids: records.iter().map(|r| r.id.clone()).collect(),
        alpha,
        beta,
        distortion_id: d.id(),
        heuristic,
        epsilon_denominator: opts.epsilon_denominator,
        bisection_eps: opts.eps,
        sample_count: k,
        quantile_index,
        infeasible_count,
        search: search.into(),
    })
}

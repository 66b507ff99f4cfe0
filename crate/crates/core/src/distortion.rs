//! Distortion measures `d(a, b)`, their masked forms `d(m*a, m*b)`, and
//! gradients with respect to the mask.
//!
//! Values are raw sums (`sum |a_i - b_i|^p`), never per-pixel means, so a
//! threshold α must be expressed in the same units as the data it applies to.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Image, Mask, Shape};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Finite-difference step for SSIM mask gradients.
pub const SSIM_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DistortionSpec {
    /// `||a - b||_p^p`, `p >= 1`.
    PNorm(f64),
    /// `1 - MSSIM(a, b)`.
    Ssim,
}

impl DistortionSpec {
    pub const L1: DistortionSpec = DistortionSpec::PNorm(1.0);
    pub const L2: DistortionSpec = DistortionSpec::PNorm(2.0);

    pub fn pnorm(p: f64) -> Result<Self> {
        if p.is_finite() && p >= 1.0 {
            Ok(DistortionSpec::PNorm(p))
        } else {
            Err(invalid(format!("p-norm exponent must be >= 1, got {p}")))
        }
    }

    /// Whether `d(m*y, m*y_hat)` is nondecreasing in every mask coordinate.
    pub fn monotone_in_mask(&self) -> bool {
        matches!(self, DistortionSpec::PNorm(_))
    }

    pub fn exponent(&self) -> Option<f64> {
        match *self {
            DistortionSpec::PNorm(p) => Some(p),
            DistortionSpec::Ssim => None,
        }
    }

    pub fn id(&self) -> String {
        self.to_string()
    }

    fn validate(&self) -> Result<()> {
        if let DistortionSpec::PNorm(p) = *self {
            DistortionSpec::pnorm(p)?;
        }
        Ok(())
    }

    pub fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        match *self {
            DistortionSpec::PNorm(p) => pnorm_distortion(a, b, p),
            DistortionSpec::Ssim => ssim_distortion(a, b),
        }
    }

    /// `d(m*y, m*y_hat)`.
    pub fn masked(&self, m: &Mask, y: &Image, y_hat: &Image) -> Result<f64> {
        masked_distortion(self, m, y, y_hat)
    }

    /// `d(m*y, m*y_hat) <= alpha`.
    pub fn within(&self, m: &Mask, y: &Image, y_hat: &Image, alpha: f64) -> Result<bool> {
        Ok(self.masked(m, y, y_hat)? <= alpha)
    }
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            DistortionSpec::PNorm(p) if p == 1.0 => f.write_str("l1"),
            DistortionSpec::PNorm(p) if p == 2.0 => f.write_str("l2"),
            DistortionSpec::PNorm(p) => write!(f, "pnorm:{p}"),
            DistortionSpec::Ssim => f.write_str("ssim"),
        }
    }
}

impl FromStr for DistortionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(DistortionSpec::L1),
            "l2" => Ok(DistortionSpec::L2),
            "ssim" => Ok(DistortionSpec::Ssim),
            other => match other.strip_prefix("pnorm:") {
                Some(p) => DistortionSpec::pnorm(
                    p.parse()
                        .map_err(|_| invalid(format!("bad p-norm exponent {p:?}")))?,
                ),
                None => Err(invalid(format!(
                    "unknown distortion {other:?} (expected l1, l2, pnorm:<p>, ssim)"
                ))),
            },
        }
    }
}

impl TryFrom<String> for DistortionSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DistortionSpec> for String {
    fn from(d: DistortionSpec) -> String {
        d.to_string()
    }
}

#[inline]
pub(crate) fn abs_pow(e: f64, p: f64) -> f64 {
    let a = e.abs();
    if p == 1.0 {
        a
    } else if p == 2.0 {
        a * a
    } else {
        a.powf(p)
    }
}

/// `sum_i |a_i - b_i|^p`.
pub fn pnorm_distortion(a: &Image, b: &Image, p: f64) -> Result<f64> {
    DistortionSpec::pnorm(p)?;
    a.shape().check_same(&b.shape())?;
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| abs_pow(x - y, p))
        .sum())
}

/// `d(m*y, m*y_hat)`.
pub fn masked_distortion(d: &DistortionSpec, m: &Mask, y: &Image, y_hat: &Image) -> Result<f64> {
    d.validate()?;
    m.shape().check_same(&y.shape())?;
    y.shape().check_same(&y_hat.shape())?;
    Ok(masked_raw(d, m.values(), y.values(), y_hat.values(), y.shape()))
}

// Callers have checked shapes. Mask entries are used as given so finite
// differences may step outside [0, 1].
pub(crate) fn masked_raw(d: &DistortionSpec, m: &[f64], y: &[f64], y_hat: &[f64], shape: Shape) -> f64 {
    match *d {
        DistortionSpec::PNorm(p) => m
            .iter()
            .zip(y.iter().zip(y_hat))
            .map(|(w, (a, b))| abs_pow(w * a - w * b, p))
            .sum(),
        DistortionSpec::Ssim => {
            let a: Vec<f64> = m.iter().zip(y).map(|(w, v)| w * v).collect();
            let b: Vec<f64> = m.iter().zip(y_hat).map(|(w, v)| w * v).collect();
            1.0 - mssim_raw(&a, &b, shape)
        }
    }
}

/// `1 - MSSIM(a, b)` with an 11x11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, averaged over valid window positions and
/// then over channels.
pub fn ssim_distortion(a: &Image, b: &Image) -> Result<f64> {
    a.shape().check_same(&b.shape())?;
    let s = a.shape();
    if s.height < SSIM_WINDOW || s.width < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: s.height,
            width: s.width,
            window: SSIM_WINDOW,
        });
    }
    Ok(1.0 - mssim_raw(a.values(), b.values(), s))
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Valid-region separable filtering of one channel plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let src = &plane[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = k.iter().zip(&src[c..c + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

pub(crate) fn mssim_raw(a: &[f64], b: &[f64], shape: Shape) -> f64 {
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for c in 0..ch {
        let pa: Vec<f64> = (0..h * w).map(|i| a[i * ch + c]).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b[i * ch + c]).collect();
        let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
        let cross: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let ea2 = filter_valid(&sq(&pa), h, w, &k);
        let eb2 = filter_valid(&sq(&pb), h, w, &k);
        let eab = filter_valid(&cross, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = ea2[i] - ma * ma;
            let vb = eb2[i] - mb * mb;
            let cov = eab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    total / ch as f64
}

/// Gradient of `d(m*y, m*y_hat)` with respect to `m`.
///
/// For p-norms: `p * m_i^(p-1) * |y_i - y_hat_i|^p`, using `sign(0) = 0`
/// when `p = 1`. SSIM uses central differences with step [`SSIM_FD_STEP`].
pub fn masked_distortion_grad(d: &DistortionSpec, m: &Mask, y: &Image, y_hat: &Image) -> Result<Vec<f64>> {
    d.validate()?;
    m.shape().check_same(&y.shape())?;
    y.shape().check_same(&y_hat.shape())?;
    if let DistortionSpec::Ssim = d {
        let s = y.shape();
        if s.height < SSIM_WINDOW || s.width < SSIM_WINDOW {
            return Err(Error::ImageTooSmall {
                height: s.height,
                width: s.width,
                window: SSIM_WINDOW,
            });
        }
    }
    let mut g = vec![0.0; m.len()];
    masked_grad_into(d, m.values(), y.values(), y_hat.values(), y.shape(), &mut g);
    Ok(g)
}

pub(crate) fn masked_grad_into(
    d: &DistortionSpec,
    m: &[f64],
    y: &[f64],
    y_hat: &[f64],
    shape: Shape,
    out: &mut [f64],
) {
    match *d {
        DistortionSpec::PNorm(p) => {
            for (i, g) in out.iter_mut().enumerate() {
                let e = abs_pow(y[i] - y_hat[i], p);
                let mi = m[i];
                *g = if p == 1.0 {
                    if mi > 0.0 {
                        e
                    } else {
                        0.0
                    }
                } else {
                    p * mi.max(0.0).powf(p - 1.0) * e
                };
            }
        }
        DistortionSpec::Ssim => {
            let mut probe = m.to_vec();
            for (i, g) in out.iter_mut().enumerate() {
                let orig = probe[i];
                probe[i] = orig + SSIM_FD_STEP;
                let up = masked_raw(d, &probe, y, y_hat, shape);
                probe[i] = orig - SSIM_FD_STEP;
                let down = masked_raw(d, &probe, y, y_hat, shape);
                probe[i] = orig;
                *g = (up - down) / (2.0 * SSIM_FD_STEP);
            }
        }
    }
}

use std::io;

use thiserror::Error;

use crate::tensor::{Mask, Shape};

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(Shape, Shape),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{what} is empty")]
    Empty { what: &'static str },

    #[error("image {height}x{width} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("distortion `{0}` is not monotone in the mask; enable the scan fallback")]
    NonMonotone(String),

    #[error("uncertainty is undefined for a mask with zero entries")]
    ZeroMaskEntry,

    #[error(
        "oracle did not reach distortion {target} within {iterations} iterations (best {best_distortion})"
    )]
    NonConvergence {
        iterations: usize,
        target: f64,
        best_distortion: f64,
        best: Box<Mask>,
    },

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize, trace: Vec<f64> },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

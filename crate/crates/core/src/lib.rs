//! Mask-based uncertainty quantification for image-to-image predictors.
//!
//! A mask `m` in `[0, 1]^n` marks which pixels of a prediction `y_hat` can be
//! trusted. The crate computes optimal masks (closed form and an oracle with
//! access to the ground truth), trains a lightweight masking model, and
//! calibrates any heuristic mask so that the masked distortion stays below a
//! threshold α on at least a β fraction of exchangeable samples.

pub mod baselines;
pub mod calibration;
pub mod dataset;
pub mod distortion;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod masker;
pub mod optimal;
pub mod oracle;
pub mod synthetic;
pub mod tensor;

pub use calibration::{calibrate, calibrated_mask, find_lambda, scan_lambda, CalibrationResult, Heuristic};
pub use dataset::{Split, TripletDataset, TripletRecord};
pub use distortion::DistortionSpec;
pub use error::{Error, Result};
pub use optimal::{binary_mask, closed_form_mask, uncertainty_from_mask, ErrorProfile};
pub use oracle::{optimize_mask, OracleConfig};
pub use tensor::{hadamard, mask_size, Field, Image, Mask, Shape};

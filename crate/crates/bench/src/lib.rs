//! Shared instance generators for the benchmarks.

use maskcal_core::{ErrorProfile, Image, Mask, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_profile(n: usize, p: f64, seed: u64) -> ErrorProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errors: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let alpha = 0.01 * errors.iter().sum::<f64>();
    ErrorProfile::new(errors, p, alpha).expect("valid profile")
}

pub fn random_triplet(shape: Shape, seed: u64) -> (Mask, Image, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = |lo: f64, hi: f64| -> Vec<f64> { (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect() };
    let m = Mask::new(shape, field(0.0, 1.0)).expect("mask");
    let y = Image::new(shape, field(0.0, 1.0)).expect("image");
    let y_hat = Image::new(shape, field(0.0, 1.0)).expect("image");
    (m, y, y_hat)
}

//! Image and mask value types.
//!
//! Both types store 64-bit floats in row-major `(height, width, channels)`
//! order with channels innermost. Values are kept inside `[0, 1]`: anything
//! outside is clamped on construction and counted in a process-wide counter
//! (see [`clamp_warnings`]).

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

static CLAMP_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// Number of values clamped into `[0, 1]` since process start.
pub fn clamp_warnings() -> usize {
    CLAMP_WARNINGS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    /// A single-channel plane.
    pub const fn plane(height: usize, width: usize) -> Self {
        Self::new(height, width, 1)
    }

    /// A flat vector of `n` entries, stored as a `1 x n` plane.
    pub const fn flat(n: usize) -> Self {
        Self::new(1, n, 1)
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// The same grid with one channel.
    pub const fn to_plane(&self) -> Shape {
        Shape::plane(self.height, self.width)
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.height, self.width, self.channels]
    }

    /// Interpret tensor dimensions as an image shape. Rank 1 is a flat
    /// vector, rank 2 a single-channel plane.
    pub fn from_dims(dims: &[usize]) -> Result<Shape> {
        match *dims {
            [n] => Ok(Shape::flat(n)),
            [h, w] => Ok(Shape::plane(h, w)),
            [h, w, c] => Ok(Shape::new(h, w, c)),
            _ => Err(Error::Format(format!(
                "cannot interpret rank-{} tensor as an image",
                dims.len()
            ))),
        }
    }

    pub(crate) fn check_same(&self, other: &Shape) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(*self, *other))
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Read access shared by [`Image`] and [`Mask`].
pub trait Field {
    fn shape(&self) -> Shape;
    fn values(&self) -> &[f64];
}

fn clamp_unit_counted(data: &mut [f64]) -> Result<usize> {
    let mut clamped = 0;
    for v in data.iter_mut() {
        if !v.is_finite() {
            return Err(invalid(format!("non-finite value {v}")));
        }
        if *v < 0.0 || *v > 1.0 {
            *v = v.clamp(0.0, 1.0);
            clamped += 1;
        }
    }
    if clamped > 0 {
        CLAMP_WARNINGS.fetch_add(clamped, Ordering::Relaxed);
        log::warn!("clamped {clamped} values into [0, 1]");
    }
    Ok(clamped)
}

macro_rules! unit_tensor {
    ($name:ident) => {
        impl $name {
            /// Builds a value from raw data, clamping out-of-range entries to
            /// `[0, 1]`. Non-finite entries and length mismatches are errors.
            pub fn new(shape: Shape, mut data: Vec<f64>) -> Result<Self> {
                if shape.len() != data.len() {
                    return Err(invalid(format!(
                        "shape {shape} needs {} values, got {}",
                        shape.len(),
                        data.len()
                    )));
                }
                clamp_unit_counted(&mut data)?;
                Ok(Self { shape, data })
            }

            pub fn filled(shape: Shape, value: f64) -> Self {
                Self {
                    shape,
                    data: vec![value.clamp(0.0, 1.0); shape.len()],
                }
            }

            pub fn zeros(shape: Shape) -> Self {
                Self::filled(shape, 0.0)
            }

            pub fn ones(shape: Shape) -> Self {
                Self::filled(shape, 1.0)
            }

            pub fn shape(&self) -> Shape {
                self.shape
            }

            pub fn values(&self) -> &[f64] {
                &self.data
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.data
            }

            pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
                let s = self.shape;
                self.data[(row * s.width + col) * s.channels + channel]
            }

            /// Per-pixel average over channels, as a plane of `height * width`.
            pub fn channel_mean(&self) -> Vec<f64> {
                let c = self.shape.channels;
                self.data
                    .chunks_exact(c)
                    .map(|px| px.iter().sum::<f64>() / c as f64)
                    .collect()
            }

            /// Nearest-neighbour resampling onto a `height x width` grid.
            pub fn resample_nearest(&self, height: usize, width: usize) -> Self {
                let src = self.shape;
                if src.height == height && src.width == width {
                    return self.clone();
                }
                let c = src.channels;
                let mut data = Vec::with_capacity(height * width * c);
                for r in 0..height {
                    let sr = ((r as f64 + 0.5) * src.height as f64 / height as f64) as usize;
                    let sr = sr.min(src.height - 1);
                    for q in 0..width {
                        let sq = ((q as f64 + 0.5) * src.width as f64 / width as f64) as usize;
                        let sq = sq.min(src.width - 1);
                        let base = (sr * src.width + sq) * c;
                        data.extend_from_slice(&self.data[base..base + c]);
                    }
                }
                Self {
                    shape: Shape::new(height, width, c),
                    data,
                }
            }
        }

        impl Field for $name {
            fn shape(&self) -> Shape {
                self.shape
            }

            fn values(&self) -> &[f64] {
                &self.data
            }
        }
    };
}

/// A dense image with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

/// Per-pixel weights in `[0, 1]`; 1 keeps a pixel, 0 removes it.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: Shape,
    data: Vec<f64>,
}

unit_tensor!(Image);
unit_tensor!(Mask);

impl Image {
    /// Clamp arbitrary finite data into `[0, 1]`.
    pub fn clamp_unit(shape: Shape, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, data)
    }

    /// Multiply every pixel by `mu` in `[0, 1]`.
    pub fn scale(&self, mu: f64) -> Image {
        let mu = mu.clamp(0.0, 1.0);
        Image {
            shape: self.shape,
            data: self.data.iter().map(|v| v * mu).collect(),
        }
    }

    /// Stack single-valued planes of equal grid size into one multi-channel image.
    pub fn stack_channels(planes: &[&Image]) -> Result<Image> {
        let first = planes.first().ok_or(Error::Empty { what: "channel list" })?;
        let grid = first.shape.to_plane();
        let mut channels = 0;
        for p in planes {
            grid.check_same(&Shape::plane(p.shape.height, p.shape.width))?;
            channels += p.shape.channels;
        }
        let mut data = Vec::with_capacity(grid.pixels() * channels);
        for px in 0..grid.pixels() {
            for p in planes {
                let c = p.shape.channels;
                data.extend_from_slice(&p.data[px * c..(px + 1) * c]);
            }
        }
        Ok(Image {
            shape: Shape::new(grid.height, grid.width, channels),
            data,
        })
    }
}

impl Mask {
    /// Average removed mass `||1 - m||_1 / n`.
    pub fn size(&self) -> f64 {
        mask_size(self)
    }

    /// Repeat a per-pixel plane across `shape.channels`.
    pub fn from_plane(shape: Shape, plane: &[f64]) -> Result<Mask> {
        if plane.len() != shape.pixels() {
            return Err(invalid(format!(
                "plane of {} values does not cover grid {shape}",
                plane.len()
            )));
        }
        let c = shape.channels;
        let data = plane
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, c))
            .collect();
        Mask::new(shape, data)
    }

    /// Reinterpret with a different shape of the same length.
    pub fn reshape(self, shape: Shape) -> Result<Mask> {
        if shape.len() != self.data.len() {
            return Err(Error::ShapeMismatch(self.shape, shape));
        }
        Ok(Mask {
            shape,
            data: self.data,
        })
    }
}

impl From<Mask> for Image {
    fn from(m: Mask) -> Image {
        Image {
            shape: m.shape,
            data: m.data,
        }
    }
}

/// Element-wise product of two equally shaped fields.
pub fn hadamard<A: Field, B: Field>(a: &A, b: &B) -> Result<Image> {
    a.shape().check_same(&b.shape())?;
    Ok(Image {
        shape: a.shape(),
        data: a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| x * y)
            .collect(),
    })
}

/// `||1 - m||_1 / n`: 0 for the all-ones mask, 1 for the all-zeros mask.
pub fn mask_size(m: &Mask) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.values().iter().map(|v| 1.0 - v).sum::<f64>() / m.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(v: &[f64]) -> Image {
        Image::new(Shape::flat(v.len()), v.to_vec()).unwrap()
    }

    fn mask(v: &[f64]) -> Mask {
        Mask::new(Shape::flat(v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn hadamard_identity_and_annihilator() {
        let a = img(&[1.0 / 3.0, 2.0 / 3.0, 1.0]);
        let ones = Mask::ones(a.shape());
        assert_eq!(hadamard(&a, &ones).unwrap(), a);
        let zeros = Mask::zeros(a.shape());
        assert_eq!(hadamard(&a, &zeros).unwrap().values(), &[0.0; 3]);
    }

    #[test]
    fn hadamard_direct_product() {
        let out = hadamard(&img(&[0.5, 0.4]), &mask(&[0.2, 0.5])).unwrap();
        assert!((out.values()[0] - 0.10).abs() < 1e-15);
        assert!((out.values()[1] - 0.20).abs() < 1e-15);
    }

    #[test]
    fn hadamard_rejects_mismatched_shapes() {
        let err = hadamard(&img(&[0.5, 0.4]), &mask(&[0.2])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(..)));
    }

    #[test]
    fn mask_size_examples() {
        assert_eq!(mask_size(&Mask::ones(Shape::flat(5))), 0.0);
        assert_eq!(mask_size(&Mask::zeros(Shape::flat(5))), 1.0);
        assert_eq!(mask_size(&mask(&[1.0, 0.5, 0.5, 0.0])), 0.5);
    }

    #[test]
    fn construction_clamps_and_counts() {
        let before = clamp_warnings();
        let i = img(&[-0.2, 0.5, 1.3]);
        assert_eq!(i.values(), &[0.0, 0.5, 1.0]);
        assert!(clamp_warnings() >= before + 2);
    }

    #[test]
    fn construction_rejects_nan_and_bad_length() {
        assert!(Image::new(Shape::flat(2), vec![0.1, f64::NAN]).is_err());
        assert!(Image::new(Shape::flat(3), vec![0.1]).is_err());
    }

    #[test]
    fn resample_nearest_doubles_grid() {
        let src = Image::new(Shape::plane(2, 2), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let up = src.resample_nearest(4, 4);
        assert_eq!(up.get(0, 0, 0), 0.1);
        assert_eq!(up.get(1, 1, 0), 0.1);
        assert_eq!(up.get(0, 3, 0), 0.2);
        assert_eq!(up.get(3, 3, 0), 0.4);
    }

    #[test]
    fn stack_channels_interleaves() {
        let a = Image::new(Shape::plane(1, 2), vec![0.1, 0.2]).unwrap();
        let b = Image::new(Shape::plane(1, 2), vec![0.3, 0.4]).unwrap();
        let s = Image::stack_channels(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(1, 2, 2));
        assert_eq!(s.values(), &[0.1, 0.3, 0.2, 0.4]);
        assert_eq!(s.channel_mean(), vec![0.2, 0.30000000000000004]);
    }

    proptest! {
        #[test]
        fn hadamard_commutes_and_associates(
            v in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0), 1..40)
        ) {
            let a = img(&v.iter().map(|t| t.0).collect::<Vec<_>>());
            let b = img(&v.iter().map(|t| t.1).collect::<Vec<_>>());
            let c = img(&v.iter().map(|t| t.2).collect::<Vec<_>>());
            prop_assert_eq!(hadamard(&a, &b).unwrap(), hadamard(&b, &a).unwrap());
            let left = hadamard(&hadamard(&a, &b).unwrap(), &c).unwrap();
            let right = hadamard(&a, &hadamard(&b, &c).unwrap()).unwrap();
            for (l, r) in left.values().iter().zip(right.values()) {
                prop_assert!((l - r).abs() < 1e-15);
            }
        }

        #[test]
        fn squaring_a_mask_never_shrinks_its_size(v in prop::collection::vec(0.0f64..=1.0, 1..64)) {
            let m = mask(&v);
            let sq = Mask::new(m.shape(), hadamard(&m, &m).unwrap().into_vec()).unwrap();
            prop_assert!(mask_size(&sq) >= mask_size(&m) - 1e-15);
            prop_assert!((0.0..=1.0).contains(&mask_size(&m)));
        }
    }
}

//! Binary tensor files (MSKT) and PNM export.
//!
//! MSKT layout, little-endian:
//!
//! ```text
//! magic  "MSKT"
//! u32    version (= 1)
//! u8     dtype (0 = f64, 1 = f32)
//! u8     ndim
//! u32    dims[ndim]
//! ...    payload, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Field, Image, Mask, Shape};

pub const MSKT_MAGIC: &[u8; 4] = b"MSKT";
pub const MSKT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

/// An n-dimensional tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(invalid(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_field<F: Field>(f: &F) -> Self {
        Self {
            dims: f.shape().dims(),
            data: f.values().to_vec(),
        }
    }

    pub fn into_image(self) -> Result<Image> {
        Image::new(Shape::from_dims(&self.dims)?, self.data)
    }

    pub fn into_mask(self) -> Result<Mask> {
        Mask::new(Shape::from_dims(&self.dims)?, self.data)
    }
}

pub fn encode_mskt(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    if t.dims.len() > u8::MAX as usize {
        return Err(invalid("too many dimensions for MSKT"));
    }
    let mut out = Vec::with_capacity(10 + 4 * t.dims.len() + dtype.width() * t.data.len());
    out.extend_from_slice(MSKT_MAGIC);
    out.extend_from_slice(&MSKT_VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        let d = u32::try_from(d).map_err(|_| invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        DType::F64 => t
            .data
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated MSKT payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode_mskt(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MSKT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = cur.u32()?;
    if version != MSKT_VERSION {
        return Err(Error::Format(format!("unsupported MSKT version {version}")));
    }
    let dtype = match cur.u8()? {
        0 => DType::F64,
        1 => DType::F32,
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let ndim = cur.u8()? as usize;
    let dims = (0..ndim)
        .map(|_| cur.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
    let payload = cur.take(
        n.checked_mul(dtype.width())
            .ok_or_else(|| Error::Format("payload size overflows".into()))?,
    )?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }
    let data: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Format(format!("non-finite value {bad} in payload")));
    }
    Ok(Tensor { dims, data })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_mskt(t, DType::F64)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_mskt(&fs::read(path)?)
}

pub fn write_image(path: impl AsRef<Path>, f: &impl Field) -> Result<()> {
    write_tensor(path, &Tensor::from_field(f))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    read_tensor(path)?.into_image()
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    read_tensor(path)?.into_mask()
}

/// Write through a temporary file in the target directory, then rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn encode_pnm(img: &Image, maxval: u16) -> Result<Vec<u8>> {
    if maxval != 255 && maxval != 65535 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    let s = img.shape();
    let magic = match s.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", s.width, s.height).into_bytes();
    for &v in img.values() {
        let q = (v * maxval as f64).round_ties_even() as u16;
        if maxval == 255 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PNM header".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported PNM magic {other:?}"))),
    };
    let mut number = || -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::Format("bad PNM header number".into()))
    };
    let width = number()?;
    let height = number()?;
    let maxval = number()?;
    if maxval != 255 && maxval != 65535 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let shape = Shape::new(height, width, channels);
    let width_bytes = if maxval == 255 { 1 } else { 2 };
    let raster = bytes
        .get(start..start + shape.len() * width_bytes)
        .ok_or_else(|| Error::Format("truncated PNM raster".into()))?;
    let scale = maxval as f64;
    let data = if maxval == 255 {
        raster.iter().map(|&b| b as f64 / scale).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    Image::new(shape, data)
}

pub fn write_pnm(path: impl AsRef<Path>, img: &Image, maxval: u16) -> Result<()> {
    write_atomic(path, &encode_pnm(img, maxval)?)
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image> {
    decode_pnm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_value_round_trip() {
        let t = Tensor::new(vec![1, 1, 1], vec![0.25]).unwrap();
        let back = decode_mskt(&encode_mskt(&t, DType::F64).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = encode_mskt(&t, DType::F64).unwrap();
        assert_eq!(&b[..4], b"MSKT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 0);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..14], &[2, 0, 0, 0]);
        assert_eq!(&b[14..18], &[3, 0, 0, 0]);
        assert_eq!(b.len(), 18 + 6 * 8);
    }

    #[test]
    fn f32_variant_decodes_to_f64() {
        let t = Tensor::new(vec![2], vec![0.5, 0.25]).unwrap();
        let b = encode_mskt(&t, DType::F32).unwrap();
        assert_eq!(b[8], 1);
        assert_eq!(decode_mskt(&b).unwrap(), t);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut b = encode_mskt(&Tensor::new(vec![1], vec![0.1]).unwrap(), DType::F64).unwrap();
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_mskt(&b), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_version_truncation_and_nan() {
        let t = Tensor::new(vec![2], vec![0.1, 0.2]).unwrap();
        let good = encode_mskt(&t, DType::F64).unwrap();

        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(decode_mskt(&v2).is_err());

        assert!(decode_mskt(&good[..good.len() - 1]).is_err());

        let nan = Tensor {
            dims: vec![1],
            data: vec![f64::NAN],
        };
        assert!(decode_mskt(&encode_mskt(&nan, DType::F64).unwrap()).is_err());
    }

    #[test]
    fn pnm_byte_scaling() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(img.values(), &[1.0, 0.0]);
    }

    #[test]
    fn pnm_quantizes_half_to_even() {
        let img = Image::filled(Shape::plane(1, 1), 0.5);
        let bytes = encode_pnm(&img, 255).unwrap();
        assert_eq!(*bytes.last().unwrap(), 128);
        let back = decode_pnm(&bytes).unwrap();
        assert_eq!(back.values(), &[128.0 / 255.0]);
    }

    #[test]
    fn pnm_sixteen_bit_rgb_with_comment() {
        let mut bytes = b"P6\n# comment\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00, 0x80, 0x00]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(img.shape(), Shape::new(1, 1, 3));
        assert_eq!(img.values()[0], 1.0);
        assert_eq!(img.values()[2], 32768.0 / 65535.0);
    }

    #[test]
    fn pnm_rejects_unsupported() {
        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pnm(b"P5\n1 1\n100\n\x00").is_err());
        assert!(encode_pnm(&Image::zeros(Shape::plane(1, 1)), 100).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mskt");
        let img = Image::new(Shape::new(2, 2, 1), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
    }

    proptest! {
        #[test]
        fn mskt_round_trip_is_identity(
            dims in prop::collection::vec(1usize..6, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut s = seed;
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from_bits(s >> 2) % 1e6
                })
                .map(|v| if v.is_finite() { v } else { 0.0 })
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode_mskt(&encode_mskt(&t, DType::F64).unwrap()).unwrap();
            prop_assert_eq!(back.dims, t.dims);
            for (a, b) in back.data.iter().zip(&t.data) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

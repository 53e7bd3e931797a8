//! `VXM1` volume files: a small little-endian container for f32 images and
//! u8 label maps, with optional per-axis spacing.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "VXM1"
//! 4       2           version (u16) = 1
//! 6       1           dtype (0 = f32, 1 = u8)
//! 7       1           has_spacing (0 or 1)
//! 8       4           rank (u32)
//! 12      4·rank      dims (u32 each)
//! ..      24          spacing, 3 × f64 (only if has_spacing)
//! ..      n·size      payload, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VXM1";
pub const VERSION: u16 = 1;
const MAX_RANK: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }

    fn from_byte(b: u8, offset: u64) -> Result<Self> {
        match b {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::U8),
            other => Err(Error::Format { offset, msg: format!("unknown dtype tag {other}") }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(Tensor<f32>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl VolumeData {
    pub fn shape(&self) -> &[usize] {
        match self {
            VolumeData::F32(t) => t.shape(),
            VolumeData::U8 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            VolumeData::F32(_) => Dtype::F32,
            VolumeData::U8 { .. } => Dtype::U8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: VolumeData,
    pub spacing: Option<[f64; 3]>,
}

impl Volume {
    pub fn image(t: Tensor<f32>) -> Self {
        Self { data: VolumeData::F32(t), spacing: None }
    }

    pub fn labels(v: &LabelVolume) -> Self {
        Self {
            data: VolumeData::U8 { shape: v.dims.to_vec(), data: v.labels.clone() },
            spacing: v.spacing,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let shape = self.data.shape();
        if shape.len() as u32 > MAX_RANK {
            return Err(Error::Config(format!("rank {} exceeds {MAX_RANK}", shape.len())));
        }
        if let Some(s) = self.spacing {
            if s.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::Config(format!("spacing must be positive, got {s:?}")));
            }
        }
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(12 + 4 * shape.len() + 24 + n * self.data.dtype().size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.dtype() as u8);
        out.push(self.spacing.is_some() as u8);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        if let Some(s) = self.spacing {
            for x in s {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        match &self.data {
            VolumeData::F32(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VolumeData::U8 { data, .. } => out.extend_from_slice(data),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:02x?}, expected \"VXM1\"") });
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
        }
        let dtype = Dtype::from_byte(r.array::<1>("dtype")?[0], 6)?;
        let has_spacing = match r.array::<1>("spacing flag")?[0] {
            0 => false,
            1 => true,
            other => return Err(Error::Format { offset: 7, msg: format!("spacing flag must be 0 or 1, got {other}") }),
        };
        let rank = u32::from_le_bytes(r.array("rank")?);
        if rank > MAX_RANK {
            return Err(Error::Format { offset: 8, msg: format!("rank {rank} exceeds {MAX_RANK}") });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.array("dims")?) as usize);
        }
        let spacing = if has_spacing {
            let at = r.pos as u64;
            let s = [
                f64::from_le_bytes(r.array("spacing")?),
                f64::from_le_bytes(r.array("spacing")?),
                f64::from_le_bytes(r.array("spacing")?),
            ];
            if s.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::Format { offset: at, msg: format!("non-positive spacing {s:?}") });
            }
            Some(s)
        } else {
            None
        };
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Format { offset: 12, msg: format!("payload size overflows for dims {shape:?}") })?;
        let payload = r.take(n, "payload")?;
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: format!("{} trailing bytes after payload", bytes.len() - r.pos),
            });
        }
        let data = match dtype {
            Dtype::F32 => {
                let v = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                VolumeData::F32(Tensor::new(&shape, v)?)
            }
            Dtype::U8 => VolumeData::U8 { shape, data: payload.to_vec() },
        };
        Ok(Self { data, spacing })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn into_image(self) -> Result<Tensor<f32>> {
        match self.data {
            VolumeData::F32(t) => Ok(t),
            VolumeData::U8 { .. } => Err(Error::Format { offset: 6, msg: "expected f32 image, found u8".into() }),
        }
    }

    /// Interprets a rank-3 u8 volume as labels in `[0, classes)`.
    pub fn into_labels(self, classes: usize) -> Result<LabelVolume> {
        match self.data {
            VolumeData::U8 { shape, data } => {
                let dims: [usize; 3] = shape
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::Format { offset: 8, msg: format!("label volume must be rank 3, got {shape:?}") })?;
                let v = LabelVolume::new(dims, data, classes)?;
                match self.spacing {
                    Some(s) => v.with_spacing(s),
                    None => Ok(v),
                }
            }
            VolumeData::F32(_) => Err(Error::Format { offset: 6, msg: "expected u8 labels, found f32".into() }),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if avail < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: expected {n} bytes, found {avail}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let v = Volume { data: VolumeData::U8 { shape: vec![2, 1, 1], data: vec![0, 1] }, spacing: None };
        let b = v.to_bytes().unwrap();
        assert_eq!(&b[..4], b"VXM1");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!((b[6], b[7]), (1, 0));
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(b.len(), 12 + 12 + 2);
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let v = Volume::image(Tensor::zeros(&[1, 1, 1]));
        let mut b = v.to_bytes().unwrap();
        b.push(0);
        assert!(matches!(Volume::from_bytes(&b), Err(Error::Format { offset: 28, .. })));
    }
}

//! `VXCK` checkpoints: model configuration, run metadata and named tensors
//! (parameters plus optimizer moments) in one little-endian file.
//!
//! ```text
//! offset  size   field
//! 0       4      magic "VXCK"
//! 4       2      version (u16) = 1
//! 6       1      dtype (0 = f32, 1 = f64)
//! 7       1      reserved (0)
//! 8       4      config length c (u32), then c bytes of JSON
//! ..      4      meta length m (u32), then m bytes of JSON
//! ..      4      tensor count (u32)
//! per tensor:
//!         2      name length (u16), then UTF-8 name
//!         1      rank (u8), then rank × u32 dims
//!         n·s    data, row-major
//! ```
//!
//! Optimizer moments are stored as `opt.m.<param>` and `opt.v.<param>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::train::OptimizerState;
use crate::unet::{UNet, VariantConfig};

pub const MAGIC: &[u8; 4] = b"VXCK";
pub const VERSION: u16 = 1;

/// Run position saved alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub seed: u64,
    pub best_val_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: VariantConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn dtype_tag<T: Real>() -> u8 {
    match T::NAME {
        "f32" => 0,
        _ => 1,
    }
}

impl<T: Real> Checkpoint<T> {
    /// Captures model parameters and, if given, optimizer moments.
    pub fn capture(model: &UNet<T>, opt: Option<&OptimizerState<T>>, meta: CheckpointMeta) -> Self {
        let mut tensors: Vec<(String, Tensor<T>)> =
            model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        if let Some(st) = opt {
            let names: Vec<&str> = model.store.iter().map(|(n, _)| n).collect();
            for (n, m) in names.iter().zip(&st.m) {
                tensors.push((format!("opt.m.{n}"), m.clone()));
            }
            for (n, v) in names.iter().zip(&st.v) {
                tensors.push((format!("opt.v.{n}"), v.clone()));
            }
        }
        Self { config: model.config().clone(), meta, tensors }
    }

    fn find(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored parameters into `model`; every parameter must be present.
    pub fn restore_model(&self, model: &mut UNet<T>) -> Result<()> {
        if model.config() != &self.config {
            return Err(Error::Config("checkpoint config does not match the model".into()));
        }
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            let t = self
                .find(&n)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {n}")))?;
            model.store.set(&n, t.clone())?;
        }
        Ok(())
    }

    /// Rebuilds optimizer state for `model`, or `None` if moments were not saved.
    pub fn restore_optimizer(&self, model: &UNet<T>) -> Result<Option<OptimizerState<T>>> {
        let names: Vec<&str> = model.store.iter().map(|(n, _)| n).collect();
        if self.find(&format!("opt.m.{}", names.first().copied().unwrap_or(""))).is_none() {
            return Ok(None);
        }
        let mut st = OptimizerState::for_model(model);
        st.step = self.meta.step;
        for (i, n) in names.iter().enumerate() {
            for (prefix, slot) in [("opt.m", &mut st.m[i]), ("opt.v", &mut st.v[i])] {
                let t = self
                    .find(&format!("{prefix}.{n}"))
                    .ok_or_else(|| Error::Config(format!("checkpoint is missing {prefix}.{n}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::dim("restore_optimizer", t.shape(), slot.shape()));
                }
                *slot = t.clone();
            }
        }
        Ok(Some(st))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(dtype_tag::<T>());
        out.push(0);
        for blob in [serde_json::to_vec(&self.config)?, serde_json::to_vec(&self.meta)?] {
            out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::Config(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Config(format!("rank too large for {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &x in t.data() {
                if dtype_tag::<T>() == 0 {
                    out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&x.as_f64().to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:02x?}, expected \"VXCK\"") });
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
        }
        let tag = r.array::<1>("dtype")?[0];
        if tag != dtype_tag::<T>() {
            return Err(Error::Format {
                offset: 6,
                msg: format!("dtype tag {tag} does not match requested {}", T::NAME),
            });
        }
        r.take(1, "reserved")?;
        let config_at = r.pos as u64;
        let config_len = u32::from_le_bytes(r.array("config length")?) as usize;
        let config: VariantConfig = serde_json::from_slice(r.take(config_len, "config")?)
            .map_err(|e| Error::Format { offset: config_at, msg: format!("config JSON: {e}") })?;
        let meta_at = r.pos as u64;
        let meta_len = u32::from_le_bytes(r.array("meta length")?) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "meta")?)
            .map_err(|e| Error::Format { offset: meta_at, msg: format!("meta JSON: {e}") })?;
        let count = u32::from_le_bytes(r.array("tensor count")?);
        let elem = if tag == 0 { 4 } else { 8 };
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_at = r.pos as u64;
            let name_len = u16::from_le_bytes(r.array("name length")?) as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format { offset: name_at, msg: "tensor name is not UTF-8".into() })?
                .to_string();
            let rank = r.array::<1>("rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.array("dims")?) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * elem, "tensor data")?;
            let data: Vec<T> = if elem == 4 {
                raw.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect()
            } else {
                raw.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect()
            };
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { config, meta, tensors })
    }

    /// Writes via a temporary sibling and rename, so a crash never leaves a
    /// half-written checkpoint under the final name.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("vxck.tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
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

//! Versioned binary checkpoints: network weights, optimizer state, epoch,
//! and random-stream positions.
//!
//! Layout (little-endian):
//!
//! ```text
//! "VSEGCKPT" | u32 version | u32 n | n bytes of JSON header
//! u32 tensor count | per tensor: u16 name length, name, u8 rank,
//!     rank × u64 extents, u8 dtype tag, payload
//! "END\0"
//! ```
//!
//! The JSON header echoes the network config, the Adam hyperparameters and
//! step, the epoch, named rng states, and free-form run metadata. Tensors are
//! the parameters in order, then `adam.m.<name>` and `adam.v.<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DType, Real, Tensor};
use crate::error::{Error, Result};
use crate::optim::{AdamParams, AdamState};
use crate::rng::RngState;
use crate::unet::{NetworkConfig, Parameters};

pub const MAGIC: &[u8; 8] = b"VSEGCKPT";
pub const VERSION: u32 = 1;
const TRAILER: &[u8; 4] = b"END\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: Parameters<T>,
    pub adam: AdamState<T>,
    pub epoch: u64,
    pub rng: BTreeMap<String, RngState>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    adam: AdamParams,
    adam_step: u64,
    epoch: u64,
    rng: BTreeMap<String, RngState>,
    meta: serde_json::Value,
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(T::DTYPE.tag());
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::MalformedCheckpoint(format!("truncated at byte {} (needed {n} more)", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn tensor<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u16()? as usize;
        let name =
            String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::MalformedCheckpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u8()? as usize;
        if !(1..=5).contains(&rank) {
            return Err(Error::MalformedCheckpoint(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).map_err(|_| Error::MalformedCheckpoint(format!("tensor {name} extent overflows")))?);
        }
        let dtype = DType::from_tag(self.u8()?).ok_or_else(|| Error::MalformedCheckpoint(format!("tensor {name} has an unknown dtype")))?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::MalformedCheckpoint(format!("tensor {name} is too large")))?;
        let data: Vec<T> = match dtype {
            DType::F32 => {
                let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::MalformedCheckpoint("size overflow".into()))?)?;
                raw.chunks_exact(4).map(|c| T::from_f64_lossy(f64::from(f32::read_le(c)))).collect()
            }
            DType::F64 => {
                let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::MalformedCheckpoint("size overflow".into()))?)?;
                raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c)).unwrap_or_else(T::nan)).collect()
            }
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::MalformedCheckpoint(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            network: *self.params.config(),
            adam: self.adam.hyper,
            adam_step: self.adam.step,
            epoch: self.epoch,
            rng: self.rng.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidParams(format!("checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let names = self.params.names();
        out.extend_from_slice(&((3 * names.len()) as u32).to_le_bytes());
        for (n, t) in names.iter().zip(self.params.tensors()) {
            put_tensor(&mut out, n, t);
        }
        for (n, t) in names.iter().zip(&self.adam.m) {
            put_tensor(&mut out, &format!("adam.m.{n}"), t);
        }
        for (n, t) in names.iter().zip(&self.adam.v) {
            put_tensor(&mut out, &format!("adam.v.{n}"), t);
        }
        out.extend_from_slice(TRAILER);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::MalformedCheckpoint("missing checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch(format!("checkpoint version {version}, this build reads {VERSION}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::MalformedCheckpoint(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let expected = header.network.parameter_shapes().len();
        if count != 3 * expected {
            return Err(Error::MalformedCheckpoint(format!("{count} tensors, expected {}", 3 * expected)));
        }
        let mut names = Vec::with_capacity(expected);
        let mut tensors = Vec::with_capacity(expected);
        for _ in 0..expected {
            let (n, t) = r.tensor::<T>()?;
            names.push(n);
            tensors.push(t);
        }
        let mut moments = [Vec::with_capacity(expected), Vec::with_capacity(expected)];
        for (k, prefix) in ["adam.m.", "adam.v."].iter().enumerate() {
            for (i, pname) in names.iter().enumerate() {
                let (n, t) = r.tensor::<T>()?;
                if n != format!("{prefix}{pname}") || t.shape() != tensors[i].shape() {
                    return Err(Error::MalformedCheckpoint(format!("unexpected optimizer tensor {n}")));
                }
                moments[k].push(t);
            }
        }
        if r.take(4)? != TRAILER {
            return Err(Error::MalformedCheckpoint("missing trailer".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::MalformedCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let params = Parameters::from_parts(header.network, names, tensors).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
        let [m, v] = moments;
        Ok(Checkpoint {
            params,
            adam: AdamState { hyper: header.adam, step: header.adam_step, m, v },
            epoch: header.epoch,
            rng: header.rng,
            meta: header.meta,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

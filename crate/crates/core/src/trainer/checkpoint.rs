//! Binary parameter snapshots.
//!
//! Layout, all little-endian: 8-byte magic `STRIPFLW`, `u32` version, `u32`
//! entry count, `u64` init seed, then per entry `u32` path length, UTF-8
//! path, `u32` rank, `u64` extents, and `f32` payload in row-major order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ModelParams;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STRIPFLW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    out.extend_from_slice(&params.init_seed().to_le_bytes());
    for (path, t) in params.iter() {
        if !t.is_finite() {
            return Err(Error::invalid("save_checkpoint", format!("{path} holds non-finite values")));
        }
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            what: "checkpoint",
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail(format!("truncated while reading {what}; file is {} bytes", self.bytes.len())));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail("unknown magic, not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let count = r.u32("entry count")?;
    let seed = r.u64("init seed")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32("path length")? as usize;
        let path = std::str::from_utf8(r.take(len, "path")?)
            .map_err(|_| {
                r.pos = start;
                r.fail("path is not UTF-8")
            })?
            .to_string();
        let rank = r.u32(&format!("rank of {path}"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64(&format!("shape of {path}"))? as usize);
        }
        let Some(len) = shape.iter().try_fold(4usize, |a, &d| a.checked_mul(d)) else {
            return Err(r.fail(format!("{path}: shape {shape:?} overflows")));
        };
        let payload = r.take(len, &format!("payload of {path}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| r.fail(format!("{path}: {e}")))?;
        if tensors.insert(path.clone(), t).is_some() {
            return Err(r.fail(format!("duplicate entry {path}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ModelParams::from_map(tensors, seed))
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

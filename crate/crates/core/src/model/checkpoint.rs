//! Binary checkpoint layout, all integers `u32` little-endian:
//!
//! ```text
//! "XMPARAM"  version  spec_len  spec (UTF-8)  classes  tensor_count
//! per tensor: rank  dim_0 .. dim_{rank-1}  f32 LE data
//! ```
//!
//! Weights are stored as 32-bit floats, so a reload equals the in-memory
//! parameters rounded to `f32`.

use std::path::Path;

use super::{BackboneSpec, ModelError, ModelParams, Tensor};
use crate::io::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"XMPARAM";
const VERSION: u32 = 1;

pub fn write_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    let spec = params.spec().to_string();
    out.extend(VERSION.to_le_bytes());
    out.extend((spec.len() as u32).to_le_bytes());
    out.extend(spec.as_bytes());
    out.extend((params.num_classes() as u32).to_le_bytes());
    out.extend((params.tensors().len() as u32).to_le_bytes());
    for t in params.tensors() {
        out.extend((t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend((v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let spec_text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| ModelError::Checkpoint("backbone spec is not UTF-8".into()))?;
    let spec: BackboneSpec = spec_text.parse()?;
    let classes = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| ModelError::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push(Tensor { shape, data });
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    ModelParams::from_tensors(spec, classes, tensors)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    write_atomic(path, &write_checkpoint(params))
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let bytes = std::fs::read(path)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(&bytes)
}

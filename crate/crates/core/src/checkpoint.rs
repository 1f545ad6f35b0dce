//! "MDLP" v1 model checkpoint.
//!
//! ```text
//! header   "MDLP" | version u32
//! spec     text_len u32 | model spec as TOML
//! tensors  count u32 | per tensor: rank u32 | rank × dim u32 | values f64
//! footer   CRC32 of every preceding byte
//! ```
//!
//! Tensors appear in [`ModelParams::tensors`] order.

use std::io::{Read, Write};
use std::path::Path;

use crate::codec::{open_reader, write_atomically, CrcReader, CrcWriter, MAX_PREALLOC};
use crate::error::{CodecError, Result};
use crate::layers::{ModelParams, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MDLP";
pub const VERSION: u32 = 1;

pub fn write_checkpoint_to<W: Write>(spec: &ModelSpec, params: &ModelParams, w: W) -> Result<W> {
    params.validate(spec)?;
    let io = CodecError::Io;
    let mut out = CrcWriter::new(w);
    out.bytes(MAGIC).map_err(io)?;
    out.u32(VERSION).map_err(io)?;
    let text = spec.to_text();
    out.u32(text.len() as u32).map_err(io)?;
    out.bytes(text.as_bytes()).map_err(io)?;
    let tensors = params.tensors();
    out.u32(tensors.len() as u32).map_err(io)?;
    for t in tensors {
        out.u32(t.rank() as u32).map_err(io)?;
        for &d in t.shape() {
            out.u32(d as u32).map_err(io)?;
        }
        for &v in t.data() {
            out.f64(v).map_err(io)?;
        }
    }
    let (w, _) = out.finish().map_err(io)?;
    Ok(w)
}

/// Atomic: a crash mid-write leaves any previous checkpoint intact.
pub fn write_checkpoint(spec: &ModelSpec, params: &ModelParams, path: &Path) -> Result<()> {
    write_atomically(path, |w| write_checkpoint_to(spec, params, w).map(|_| ()))
}

pub fn read_checkpoint_from<R: Read>(reader: R) -> Result<(ModelSpec, ModelParams)> {
    let mut r = CrcReader::new(reader);
    r.header(MAGIC, VERSION)?;
    let len = r.u32("spec length")? as usize;
    let text = String::from_utf8(r.vec(len, "spec text")?)
        .map_err(|_| CodecError::Invalid("model spec is not UTF-8".into()))?;
    let spec = ModelSpec::from_text(&text)
        .map_err(|e| CodecError::Invalid(format!("model spec: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(MAX_PREALLOC));
    for _ in 0..count {
        let rank = r.u32("tensor rank")? as usize;
        if !(1..=3).contains(&rank) {
            return Err(CodecError::Invalid(format!("tensor rank {rank}")).into());
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = r.u32("tensor dim")? as usize;
            n = n
                .checked_mul(d)
                .ok_or_else(|| CodecError::Invalid("tensor size overflows".into()))?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            data.push(r.f64("tensor values")?);
        }
        let t = Tensor::new(shape, data).map_err(|e| CodecError::Invalid(format!("tensor: {e}")))?;
        tensors.push(t);
    }
    r.finish()?;
    let params = ModelParams::from_tensors(&spec, tensors)
        .map_err(|e| CodecError::Invalid(format!("parameters: {e}")))?;
    Ok((spec, params))
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelSpec, ModelParams)> {
    read_checkpoint_from(open_reader(path)?)
}

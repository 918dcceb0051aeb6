//! `MKT1` binary tensor files: magic `MKT1`, `u8` rank, `rank × u64` LE
//! extents, then the row-major `f64` LE payload.

use std::fs;
use std::path::Path;

use crate::error::{MktError, Result};
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MKT1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 8 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(MktError::Format("missing MKT1 magic".into()));
    }
    let rank = bytes[4] as usize;
    let header = 5 + 8 * rank;
    if bytes.len() < header {
        return Err(MktError::Format("truncated MKT1 header".into()));
    }
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| MktError::Format("extent overflow".into()))?;
    let payload = &bytes[header..];
    if payload.len() != numel * 8 {
        return Err(MktError::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            numel * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| MktError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MktError::io(path, e))?;
    decode(&bytes)
}

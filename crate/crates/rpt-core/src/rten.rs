//! RTEN: raw tensor container for debugging dumps, fixtures, and checkpoints.
//!
//! Layout: magic `RTEN`, version byte 1, u8 dtype tag (1 = f32, 2 = f64),
//! u8 rank, rank little-endian u64 extents, then the row-major payload.

use alloc::vec::Vec;

use crate::elem::{Dtype, Elem};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RTEN";
pub const VERSION: u8 = 1;

pub fn encode<E: Elem>(t: &Tensor<E>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + t.numel() * E::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(E::DTYPE.tag());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decode a tensor, returning it plus the number of bytes consumed.
pub fn decode<E: Elem>(bytes: &[u8]) -> Result<(Tensor<E>, usize)> {
    if bytes.len() < 7 {
        return Err(Error::Truncated("rten"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic { expected: "RTEN" });
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(alloc::format!("unsupported RTEN version {}", bytes[4])));
    }
    let dtype = Dtype::from_tag(bytes[5]).ok_or(Error::UnsupportedDtype(bytes[5]))?;
    if dtype != E::DTYPE {
        return Err(Error::ConfigMismatch(alloc::format!(
            "RTEN dtype tag {} does not match requested element type",
            bytes[5]
        )));
    }
    let rank = bytes[6] as usize;
    let mut off = 7;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if off + 8 > bytes.len() {
            return Err(Error::Truncated("rten"));
        }
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[off..off + 8]);
        shape.push(u64::from_le_bytes(b) as usize);
        off += 8;
    }
    let numel: usize = shape.iter().product();
    let payload = numel * dtype.size();
    if off + payload > bytes.len() {
        return Err(Error::Truncated("rten"));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let start = off + i * dtype.size();
        data.push(E::read_le(&bytes[start..start + dtype.size()]));
    }
    off += payload;
    Ok((Tensor::new(shape, data)?, off))
}

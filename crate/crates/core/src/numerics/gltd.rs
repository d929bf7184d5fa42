//! The `GLTD` raw tensor format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"GLTD" | u32 version = 1 | u32 rank | u64 dims[rank] | f64 payload[prod(dims)]
//! ```
//!
//! Several records may be concatenated in one file; [`read_all`] walks them in
//! order.

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GLTD";
pub const VERSION: u32 = 1;

/// Appends one record to `out`.
pub fn encode_into(tensor: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * (tensor.rank() + tensor.len()));
    encode_into(tensor, &mut out);
    out
}

/// Decodes one record from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Format("truncated GLTD record".into()));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(Error::Format("bad GLTD magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported GLTD version {version}")));
    }
    let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflow".into()))?;
    let payload = take(
        n.checked_mul(8)
            .ok_or_else(|| Error::Format("payload overflow".into()))?,
    )?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let consumed = bytes.len() - cur.len();
    Ok((Tensor::new(shape, data)?, consumed))
}

pub fn read_all(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut offset = 0;
    while offset < bytes.len() {
        let (t, used) = decode(&bytes[offset..])?;
        out.push(t);
        offset += used;
    }
    Ok(out)
}

pub fn write_to(tensor: &Tensor, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(&encode(tensor))
}

pub fn read_from(mut r: impl Read) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<reader>", e))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format("trailing bytes after GLTD record".into()));
    }
    Ok(t)
}

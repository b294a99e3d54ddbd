//! Binary tensor snapshots.
//!
//! Layout: `b"CFTN"`, version byte `0x01`, `u32` LE rank, `rank` × `u32` LE
//! dimensions, then the row-major payload as `f64` LE. A rank of zero
//! denotes a scalar with one payload value.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CFTN";
pub const VERSION: u8 = 0x01;

/// Rank cap on decode; the pipeline never goes past rank 4.
const MAX_RANK: usize = 16;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Decode(format!(
                "truncated snapshot: need {n} bytes for {what} at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Decode("bad magic, expected CFTN".into()));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Decode(format!("unsupported snapshot version {version}")));
    }
    let rank = r.u32("rank")? as usize;
    if rank > MAX_RANK {
        return Err(Error::Decode(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = r.u32("dimension")? as usize;
        if d == 0 {
            return Err(Error::Decode(format!("dimension {i} is zero")));
        }
        shape.push(d);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Decode(format!("shape {shape:?} overflows")))?;
    let expected = numel
        .checked_mul(8)
        .ok_or_else(|| Error::Decode(format!("shape {shape:?} overflows")))?;
    let remaining = bytes.len() - r.pos;
    if remaining != expected {
        return Err(Error::Decode(format!(
            "payload for shape {shape:?} needs {expected} bytes, found {remaining}"
        )));
    }
    let payload = r.take(expected, "payload")?;
    let mut data = Vec::with_capacity(numel);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::Decode(format!("non-finite value at element {i}")));
        }
        data.push(v);
    }
    Tensor::new(shape, data)
}

pub fn save(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.at(path))
}

//! Binary checkpoint for policy parameters.
//!
//! Layout (little endian): magic `DFLPOLCK`, format version (u32), network
//! count (u32), then per network the dims `v1 v2 k1 k3` (u64), the leaky
//! slope (f64), the tensor count (u64) and each tensor as rows, cols (u64)
//! followed by its entries in row-major order.

use std::path::Path;

use super::network::{PolicyDims, PolicyParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DFLPOLCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub actor: PolicyParams,
    pub critic: PolicyParams,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_params(out: &mut Vec<u8>, p: &PolicyParams) {
    for d in [p.dims.v1, p.dims.v2, p.dims.k1, p.dims.k3] {
        put_u64(out, d as u64);
    }
    out.extend_from_slice(&p.dims.slope.to_le_bytes());
    let tensors = p.tensors();
    put_u64(out, tensors.len() as u64);
    for t in tensors {
        put_u64(out, t.nrows() as u64);
        put_u64(out, t.ncols() as u64);
        for r in 0..t.nrows() {
            for c in 0..t.ncols() {
                out.extend_from_slice(&t[(r, c)].to_le_bytes());
            }
        }
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    encode_params(&mut out, &ck.actor);
    encode_params(&mut out, &ck.critic);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size out of range".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_params(r: &mut Reader<'_>) -> Result<PolicyParams> {
    let dims = PolicyDims {
        v1: r.usize()?,
        v2: r.usize()?,
        k1: r.usize()?,
        k3: r.usize()?,
        slope: r.f64()?,
    };
    dims.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut p = PolicyParams::zeros(dims);
    let count = r.usize()?;
    let mut tensors = p.tensors_mut();
    if count != tensors.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", tensors.len())));
    }
    for (k, t) in tensors.iter_mut().enumerate() {
        let (rows, cols) = (r.usize()?, r.usize()?);
        if (rows, cols) != (t.nrows(), t.ncols()) {
            return Err(Error::Checkpoint(format!(
                "tensor {k} has shape {rows}x{cols}, expected {}x{}",
                t.nrows(),
                t.ncols()
            )));
        }
        for i in 0..rows {
            for j in 0..cols {
                t[(i, j)] = r.f64()?;
            }
        }
    }
    Ok(p)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a policy checkpoint".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    if r.u32()? != 2 {
        return Err(Error::Checkpoint("expected an actor and a critic".into()));
    }
    let actor = decode_params(&mut r)?;
    let critic = decode_params(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { actor, critic })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ck))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

//! Flat binary parameter container.
//!
//! ```text
//! magic   8 bytes  "CDCNCKPT"
//! version u32
//! count   u32
//! count × {
//!     name_len u32, name (UTF-8)
//!     rank u32, rank × dim u64
//!     ∏dims × f64
//! }
//! ```
//!
//! Every integer and float is little-endian.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CDCNCKPT";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} while reading {what}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("entry {i}: name is not UTF-8")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dim")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or_else(|| Error::Checkpoint(format!("entry {name}: implausible shape {shape:?}")))?;
        let raw = r.take(n * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(&name, Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

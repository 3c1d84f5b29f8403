//! Binary weight file.
//!
//! ```text
//! "VXWM" | u32 tensor count | tensors... | u32 CRC32 of all preceding bytes
//! tensor: u32 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 data
//! ```
//!
//! All integers and floats are little-endian. Values are stored as `f32`, so
//! a store written and read back equals `ParamStore::round_to_f32` of the
//! original.

use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VXWM";

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("weight file ends inside a tensor"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::format("not a weight file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect();
        if store.find(name).is_some() {
            return Err(Error::format(format!("duplicate tensor {name}")));
        }
        store.add(name, Tensor::from_vec(&dims, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::format("trailing bytes after last tensor"));
    }
    Ok(store)
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    std::fs::write(path, to_bytes(store))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("config/levels", Tensor::scalar(3.0));
        s.add("post/head/weight", Tensor::from_vec(&[2, 1, 1, 1, 1], vec![0.1, -2.5]).unwrap());
        s
    }

    #[test]
    fn roundtrip_equals_f32_rounding() {
        let s = sample();
        let back = from_bytes(&to_bytes(&s)).unwrap();
        let mut expect = s.clone();
        expect.round_to_f32();
        assert_eq!(back, expect);
        assert_eq!(to_bytes(&back), to_bytes(&s));
    }

    #[test]
    fn corruption_is_detected() {
        let mut b = to_bytes(&sample());
        b[10] ^= 1;
        assert!(matches!(from_bytes(&b), Err(Error::Checksum { .. })));
        let b = to_bytes(&sample());
        assert!(from_bytes(&b[..b.len() - 1]).is_err());
        assert!(from_bytes(b"nope").is_err());
    }
}

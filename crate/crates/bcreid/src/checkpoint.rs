//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! `b"BCRCKPT\0"`, `u32` version, `u64` task index, `u8` attention mode,
//! `u32` tensor count, then per tensor `u16` name length, UTF-8 name, `u8`
//! rank, `u64` extents and the `f64` payload; a trailing `u64` FNV-1a of
//! every preceding byte.

use std::path::Path;

use bcreid_core::hash::fnv1a;
use bcreid_core::model::{attention_code, attention_from_code, FrozenOldHead, ModelParams, PARAM_NAMES};
use bcreid_core::Tensor;

use crate::error::{read, write_atomic, Error, Result};

const MAGIC: &[u8; 8] = b"BCRCKPT\0";
const VERSION: u32 = 1;
const FROZEN_NAME: &str = "frozen.part_head";

pub fn encode(params: &ModelParams, frozen: Option<&FrozenOldHead>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.task_index as u64).to_le_bytes());
    out.push(attention_code(params.attention));
    let mut named: Vec<(&str, &Tensor)> = PARAM_NAMES.iter().copied().zip(params.tensors()).collect();
    if let Some(f) = frozen {
        named.push((FROZEN_NAME, &f.part_head));
    }
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "checkpoint is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(ModelParams, Option<FrozenOldHead>)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(Error::Integrity { path: path.to_path_buf(), msg: "checksum mismatch".into() });
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len(), path };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let task_index = r.u64()? as usize;
    let attention = attention_from_code(r.u8()?).ok_or_else(|| Error::format(path, "unknown attention mode"))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut frozen = None;
    for i in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?.to_owned();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(&shape, data)?;
        if name == FROZEN_NAME {
            frozen = Some(FrozenOldHead { part_head: t });
        } else if PARAM_NAMES.get(i) == Some(&name.as_str()) {
            tensors.push(t);
        } else {
            return Err(Error::format(path, format!("unexpected tensor {name:?} at position {i}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after the tensor table"));
    }
    Ok((ModelParams::from_tensors(task_index, attention, tensors)?, frozen))
}

pub fn save(path: &Path, params: &ModelParams, frozen: Option<&FrozenOldHead>) -> Result<()> {
    write_atomic(path, &encode(params, frozen))
}

pub fn load(path: &Path) -> Result<(ModelParams, Option<FrozenOldHead>)> {
    decode(&read(path)?, path)
}

/// FNV-1a of a checkpoint file's bytes.
pub fn file_hash(path: &Path) -> Result<u64> {
    Ok(fnv1a(&read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use bcreid_core::model::Consolidation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParams::init(5, Some(Consolidation::Average), &mut rng).unwrap();
        let frozen = p.advance(6, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save(&path, &p, Some(&frozen)).unwrap();
        let (q, f) = load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(f, Some(frozen));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 1;
        assert!(matches!(decode(&bytes, &path), Err(Error::Integrity { .. })));
        assert!(matches!(decode(&bytes[..30], &path), Err(Error::Integrity { .. } | Error::Format { .. })));
    }
}

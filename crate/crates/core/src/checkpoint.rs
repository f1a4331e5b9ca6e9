//! Binary parameter files.
//!
//! Layout (all integers little-endian): `UNIC`, version `u32`, entry count
//! `u32`, then per entry name length `u32`, UTF-8 name, rank `u32`, extents
//! `u64` each, dtype `u8` (0 = f32), raw data; finally an FNV-1a `u64` over
//! every preceding byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Fnv64, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"UNIC";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &e in p.tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut h = Fnv64::new();
    h.write(&out);
    out.extend_from_slice(&h.finish().to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Named tensors in file order. Magic, version and checksum are verified
/// before anything else is parsed.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut h = Fnv64::new();
    h.write(body);
    if h.finish() != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("{name}: unknown dtype {dtype}")));
        }
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(store)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Copies entries into `store`. A name the store lacks, or an extent
/// mismatch, is an error. With `strict`, every store parameter must be
/// present in the file.
pub fn restore(store: &mut ParamStore<f32>, entries: Vec<(String, Tensor<f32>)>, strict: bool) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for (name, t) in entries {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let p = store.get_mut(id);
        if p.tensor.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: extents {:?} in file, {:?} in model",
                t.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = t;
        seen[id.0] = true;
    }
    if strict {
        if let Some((_, p)) = store.iter().find(|(id, _)| !seen[id.0]) {
            return Err(Error::Checkpoint(format!("missing parameter {}", p.name)));
        }
    }
    Ok(())
}

pub fn load(path: &Path, store: &mut ParamStore<f32>, strict: bool) -> Result<()> {
    restore(store, read(path)?, strict)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert(
            "a.weight",
            Tensor::from_f64(&[2, 3], &[1.0, -2.5, 3.0, 0.0, 1e-30, -7.0]).unwrap(),
            true,
        )
        .unwrap();
        s.insert("b", Tensor::from_f64(&[1], &[f32::MIN_POSITIVE as f64]).unwrap(), false)
            .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let mut t = store();
        for (_, p) in t.iter_mut() {
            p.tensor = Tensor::zeros(p.tensor.shape());
        }
        restore(&mut t, decode(&encode(&s)).unwrap(), true).unwrap();
        assert_eq!(t.checksum(), s.checksum());
    }

    #[test]
    fn every_flipped_byte_is_rejected() {
        let bytes = encode(&store());
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(decode(&b).is_err(), "byte {i}");
        }
    }

    #[test]
    fn layout_header() {
        let bytes = encode(&store());
        assert_eq!(&bytes[..4], b"UNIC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(&bytes[16..24], b"a.weight");
    }

    #[test]
    fn unknown_and_missing_names() {
        let mut small = ParamStore::<f32>::new();
        small.insert("b", Tensor::zeros(&[1]), true).unwrap();
        let err = restore(&mut small, decode(&encode(&store())).unwrap(), false).unwrap_err();
        assert!(err.to_string().contains("a.weight"), "{err}");
        let mut big = store();
        big.insert("c", Tensor::zeros(&[1]), true).unwrap();
        assert!(restore(&mut big, decode(&encode(&store())).unwrap(), true).is_err());
        let mut big2 = store();
        big2.insert("c", Tensor::zeros(&[1]), true).unwrap();
        restore(&mut big2, decode(&encode(&store())).unwrap(), false).unwrap();
    }
}

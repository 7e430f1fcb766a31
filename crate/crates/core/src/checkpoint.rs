//! Binary parameter checkpoints and their text manifests.
//!
//! Layout, all little-endian: the 8-byte magic `LFNCKPT\0`, a `u32` format
//! version, a `u32` record count, then per record sorted by name: `u32` name
//! length, UTF-8 name, `u32` rank, `u32` dims, and `f32` values.

use std::fs;
use std::path::Path;

use liteflow_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LFNCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.sorted() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let dims = p.value.shape().dims();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decoded `(name, tensor)` records in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a liteflow checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint format version {version}, expected {VERSION}")));
    }
    let count = r.u32()? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("checkpoint name is not UTF-8".into()))?;
        if out.last().is_some_and(|(prev, _)| *prev >= name) {
            return Err(Error::Format(format!("checkpoint records not sorted at `{name}`")));
        }
        let rank = r.u32()? as usize;
        if rank != 4 {
            return Err(Error::Format(format!("`{name}`: rank {rank}, expected 4")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("checkpoint tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
        out.push((name, Tensor::from_vec([dims[0], dims[1], dims[2], dims[3]], data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Overwrites every parameter of `store` from `bytes`; names and shapes must match exactly.
pub fn load_into(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let records = decode(bytes)?;
    if records.len() != store.len() {
        return Err(Error::Format(format!("checkpoint has {} tensors, model has {}", records.len(), store.len())));
    }
    for (name, value) in records {
        let id = store.id(&name).map_err(|_| Error::Format(format!("checkpoint tensor `{name}` is not a model parameter")))?;
        let p = store.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::Format(format!("`{name}`: checkpoint shape {} vs model {}", value.shape(), p.value.shape())));
        }
        p.value = value;
    }
    Ok(())
}

/// One line per tensor: name, shape and element count, then the total.
pub fn manifest(store: &ParamStore) -> String {
    let mut s = String::new();
    for p in store.sorted() {
        let d = p.value.shape().dims();
        s.push_str(&format!("{}\t{}x{}x{}x{}\t{}\n", p.name, d[0], d[1], d[2], d[3], p.value.numel()));
    }
    s.push_str(&format!("total\t-\t{}\n", store.total_elements()));
    s
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_into(store, &bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("b", Tensor::from_fn([1, 2, 1, 3], |_, c, _, x| c as f64 - x as f64 * 0.5)).unwrap();
        s.add("a", Tensor::full([2, 1, 1, 1], 0.25)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let s = store();
        let bytes = encode(&s);
        let mut t = store();
        t.iter_mut().for_each(|(_, p)| p.value.fill(9.0));
        load_into(&mut t, &bytes).unwrap();
        assert_eq!(encode(&t), bytes);
        let names: Vec<String> = decode(&bytes).unwrap().into_iter().map(|r| r.0).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = encode(&store());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros([1, 1, 1, 1])).unwrap();
        other.add("b", Tensor::zeros([1, 2, 1, 3])).unwrap();
        assert!(load_into(&mut other, &bytes).is_err());
    }

    #[test]
    fn manifest_lists_totals() {
        let m = manifest(&store());
        assert_eq!(m, "a\t2x1x1x1\t2\nb\t1x2x1x3\t6\ntotal\t-\t8\n");
    }
}

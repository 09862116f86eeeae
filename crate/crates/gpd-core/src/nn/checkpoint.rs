//! Versioned named-array checkpoint files shared by the map codec and the
//! world model.
//!
//! Layout (little-endian):
//!   magic  b"GPDNARR1"
//!   u32    header entry count, then per entry u32-length-prefixed
//!          UTF-8 key and value
//!   u32    array count, then per array u32-length-prefixed name,
//!          u32 rows, u32 cols, rows*cols f32 values

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::graph::NnError;
use super::params::ParamStore;
use super::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"GPDNARR1";

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn header_get(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn header_require(&self, key: &str) -> Result<&str, NnError> {
        self.header_get(key)
            .ok_or_else(|| NnError::Checkpoint(format!("missing header key '{key}'")))
    }

    pub fn array(&self, name: &str) -> Result<&Tensor<f32>, NnError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NnError::Checkpoint(format!("missing array '{name}'")))
    }

    pub fn push_store<E: Real>(&mut self, prefix: &str, store: &ParamStore<E>) {
        for (name, tensor) in store.iter() {
            self.arrays
                .push((format!("{prefix}{name}"), tensor.to_f32_t()));
        }
    }

    /// Load arrays `prefix<name>` back into an existing store, which must
    /// contain exactly the expected names and shapes.
    pub fn load_store<E: Real>(
        &self,
        prefix: &str,
        store: &mut ParamStore<E>,
    ) -> Result<(), NnError> {
        for i in 0..store.len() {
            let name = store.at(i).0.to_string();
            let arr = self.array(&format!("{prefix}{name}"))?;
            let dst = store.at_mut(i);
            if dst.rows != arr.rows || dst.cols != arr.cols {
                return Err(NnError::Checkpoint(format!(
                    "array '{name}' has shape {}, expected {}",
                    arr.shape_str(),
                    dst.shape_str()
                )));
            }
            *dst = Tensor::from_f32_t(arr);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        write_u32(&mut out, self.header.len() as u32);
        for (k, v) in &self.header {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        write_u32(&mut out, self.arrays.len() as u32);
        for (name, t) in &self.arrays {
            write_str(&mut out, name);
            write_u32(&mut out, t.rows as u32);
            write_u32(&mut out, t.cols as u32);
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let n_header = r.u32()? as usize;
        let mut header = Vec::with_capacity(n_header);
        for _ in 0..n_header {
            let k = r.string()?;
            let v = r.string()?;
            header.push((k, v));
        }
        let n_arrays = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push((name, Tensor::from_vec(rows, cols, data)));
        }
        Ok(Checkpoint { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a file, used to pin the codec a world model was
/// trained against.
pub fn sha256_file(path: &Path) -> Result<String, NnError> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    write_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String, NnError> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| NnError::Checkpoint("invalid utf-8 in name".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut ck = Checkpoint::default();
        ck.header.push(("version".into(), "1".into()));
        ck.header.push(("dim".into(), "64".into()));
        ck.arrays.push((
            "w".into(),
            Tensor::from_vec(2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-7, -9.25]),
        ));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.arrays, ck.arrays);
        // byte-identical on re-serialize
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_detected() {
        let mut ck = Checkpoint::default();
        ck.arrays.push(("w".into(), Tensor::zeros(4, 4)));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn store_round_trip() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.insert("a", Tensor::from_vec(1, 2, vec![0.5, -0.5]));
        store.insert("b", Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let mut ck = Checkpoint::default();
        ck.push_store("m.", &store);
        let mut store2: ParamStore<f32> = ParamStore::new();
        store2.insert("a", Tensor::zeros(1, 2));
        store2.insert("b", Tensor::zeros(2, 2));
        ck.load_store("m.", &mut store2).unwrap();
        assert_eq!(store.get("a"), store2.get("a"));
        assert_eq!(store.get("b"), store2.get("b"));
    }
}

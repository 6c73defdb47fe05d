//! Named-record binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HTFM" | version: u32 | records: u32 |
//!   { name_len: u32 | name: utf-8 | rows: u64 | cols: u64 | rows*cols f64 }*
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor2};

pub const MAGIC: &[u8; 4] = b"HTFM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<(String, Tensor2)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor2) {
        self.records.push((name.into(), value));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.push(name, Tensor2::scalar(value));
    }

    /// Appends every parameter of `store` under `prefix`.
    pub fn push_params(&mut self, prefix: &str, store: &ParamStore) {
        for (name, v) in store.named_values() {
            self.push(format!("{prefix}{name}"), v.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).filter(|t| t.len() == 1).map(|t| t.data()[0])
    }

    pub fn records(&self) -> &[(String, Tensor2)] {
        &self.records
    }

    /// Copies records under `prefix` into `store` by parameter name.
    pub fn load_params(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        store.load_named(|name| self.get(&format!("{prefix}{name}")))
    }

    /// Merges records of `other`, replacing same-named records.
    pub fn merge(&mut self, other: &Checkpoint) {
        for (name, v) in &other.records {
            if let Some(slot) = self.records.iter_mut().find(|(n, _)| n == name) {
                slot.1 = v.clone();
            } else {
                self.records.push((name.clone(), v.clone()));
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| "truncated header")?;
        if &magic != MAGIC {
            return Err("bad magic".into());
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let count = read_u32(&mut r)? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if r.len() < len {
                return Err("truncated record name".into());
            }
            let name = std::str::from_utf8(&r[..len])
                .map_err(|_| "record name is not utf-8")?
                .to_string();
            r = &r[len..];
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| format!("truncated data for record {name}"))?;
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[n * 8..];
            let t = Tensor2::from_vec(rows, cols, data).map_err(|e| e.to_string())?;
            records.push((name, t));
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|d| Error::format(path, d))
    }
}

fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| "truncated u32")?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> std::result::Result<u64, String> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| "truncated u64")?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            names in proptest::collection::vec("[a-z/._0-9]{1,12}", 0..5),
            seed in any::<u64>(),
        ) {
            let mut ck = Checkpoint::new();
            for (k, n) in names.iter().enumerate() {
                let rows = (seed as usize + k) % 4;
                let cols = (seed as usize / 7 + 2 * k) % 5;
                let t = Tensor2::from_fn(rows, cols, |i, j| {
                    f64::from_bits(seed.rotate_left((i * 5 + j + k) as u32) & 0x7fef_ffff_ffff_ffff)
                });
                ck.push(n.clone(), t);
            }
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), ck.to_bytes());
            prop_assert_eq!(back.records().len(), ck.records().len());
        }
    }

    #[test]
    fn header_layout() {
        let mut ck = Checkpoint::new();
        ck.push("a", Tensor2::from_vec(1, 2, vec![1.0, -2.0]).unwrap());
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"HTFM");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(b[16], b'a');
        assert_eq!(u64::from_le_bytes(b[17..25].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[25..33].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(b[41..49].try_into().unwrap()), -2.0);
        assert_eq!(b.len(), 49);
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new();
        ck.push("w", Tensor2::zeros(2, 2));
        let mut b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
    }
}

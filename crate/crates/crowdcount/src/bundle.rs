//! Binary weight-bundle serialization.
//!
//! Layout: magic `CPNW`, u32 version (currently 1), u32 record count; then
//! per record a u16 name length, the UTF-8 name, a u8 rank, rank u32 dims,
//! and the f32 payload. All multi-byte values little-endian. Floats are
//! stored bit-exactly, so load(save(m)) reproduces parameters to the bit.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BUNDLE_MAGIC: &[u8; 4] = b"CPNW";
pub const BUNDLE_VERSION: u32 = 1;
const MAX_RANK: u8 = 8;

/// Serialize named tensors in the given order.
pub fn save_records(path: &Path, records: &[(String, &Tensor<f32>)]) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(BUNDLE_MAGIC);
    bytes.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("record name too long ({} bytes)", name_bytes.len())));
        }
        if t.shape().len() > MAX_RANK as usize {
            return Err(Error::invalid(format!("record '{name}' has rank {}", t.shape().len())));
        }
        bytes.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name_bytes);
        bytes.push(t.shape().len() as u8);
        for d in t.shape() {
            bytes.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// A strict little-endian reader that reports *what* was being read when the
/// file ran out, so truncation errors are actionable.
struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated: {what} needs {n} bytes at offset {}, file has {}",
                    self.at,
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Load all records in file order.
pub fn load_records(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let p = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(p.clone(), e))?;
    let mut r = Reader { bytes: &bytes, at: 0, path: &p };

    let magic = r.take(4, "magic")?;
    if magic != BUNDLE_MAGIC {
        return Err(Error::format(&p, format!("bad magic {magic:?} (expected 'CPNW')")));
    }
    let version = r.u32("version")?;
    if version != BUNDLE_VERSION {
        return Err(Error::format(&p, format!("unsupported version {version} (expected {BUNDLE_VERSION})")));
    }
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16(&format!("record {i} name length"))? as usize;
        let name_bytes = r.take(name_len, &format!("record {i} name"))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::format(&p, format!("record {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u8(&format!("record '{name}' rank"))?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(&p, format!("record '{name}' has invalid rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for d in 0..rank {
            let dim = r.u32(&format!("record '{name}' dim {d}"))? as u64;
            numel = numel.saturating_mul(dim);
            shape.push(dim as usize);
        }
        if numel == 0 || numel > (1 << 31) {
            return Err(Error::format(&p, format!("record '{name}' has implausible size {numel}")));
        }
        let payload = r.take(numel as usize * 4, &format!("record '{name}' payload"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(Error::format(&p, format!("{} trailing bytes after last record", bytes.len() - r.at)));
    }
    Ok(records)
}

/// Load records into a name-keyed map (names must be unique).
pub fn load_record_map(path: &Path) -> Result<HashMap<String, Tensor<f32>>> {
    let records = load_records(path)?;
    let mut map = HashMap::with_capacity(records.len());
    for (name, t) in records {
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::format(
                path.display().to_string(),
                format!("duplicate record '{name}'"),
            ));
        }
    }
    Ok(map)
}

//! Binary checkpoint container.
//!
//! Layout: magic `CAPN`, u32 version, length-prefixed UTF-8 JSON metadata,
//! then per-tensor records (length-prefixed name, dtype code, rank, u64
//! extents, little-endian payload). f64 payloads round-trip bit-exactly;
//! the optional f32 storage mode is bit-exact at f32 precision.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CAPN";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Debug)]
pub struct CheckpointData {
    pub meta: serde_json::Value,
    /// (name, shape, values) triples in canonical parameter order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn save(path: &Path, data: &CheckpointData, f32_storage: bool) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(&data.meta).expect("metadata serializes");
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(data.tensors.len() as u32).to_le_bytes());
    for (name, shape, values) in &data.tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(if f32_storage { DTYPE_F32 } else { DTYPE_F64 });
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        if f32_storage {
            for &v in values {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        } else {
            for &v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("magic mismatch: got {magic:02x?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let json_len = r.u32("metadata length")? as usize;
    let json = r.take(json_len, "metadata")?;
    let meta: serde_json::Value = serde_json::from_slice(json)
        .map_err(|e| Error::Checkpoint(format!("bad metadata JSON: {e}")))?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = r.take(1, "dtype")?[0];
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let values = match dtype {
            DTYPE_F64 => {
                let raw = r.take(numel * 8, "f64 payload")?;
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            }
            DTYPE_F32 => {
                let raw = r.take(numel * 4, "f32 payload")?;
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            other => return Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
        };
        tensors.push((name, shape, values));
    }
    Ok(CheckpointData { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_data() -> CheckpointData {
        CheckpointData {
            meta: serde_json::json!({"step": 7, "note": "t"}),
            tensors: vec![
                ("a.weight".into(), vec![2, 3], vec![1.0, -2.5, 3.25, 0.1, -0.0, 5e-300]),
                ("a.bias".into(), vec![3], vec![0.5, 0.25, -0.125]),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.capn");
        let data = sample_data();
        save(&path, &data, false).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.meta, data.meta);
        assert_eq!(back.tensors.len(), 2);
        for (orig, loaded) in data.tensors.iter().zip(&back.tensors) {
            assert_eq!(orig.0, loaded.0);
            assert_eq!(orig.1, loaded.1);
            for (a, b) in orig.2.iter().zip(&loaded.2) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn f32_storage_is_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x32.capn");
        let data = sample_data();
        save(&path, &data, true).unwrap();
        let back = load(&path).unwrap();
        for (orig, loaded) in data.tensors.iter().zip(&back.tensors) {
            for (a, b) in orig.2.iter().zip(&loaded.2) {
                assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
            }
        }
    }

    #[test]
    fn corrupted_magic_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.capn");
        save(&path, &sample_data(), false).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncation_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.capn");
        save(&path, &sample_data(), false).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn wrong_version_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.capn");
        save(&path, &sample_data(), false).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}

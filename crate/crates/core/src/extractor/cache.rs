//! On-disk feature cache: a JSONL index plus one binary file per vector.
//!
//! Vector file layout: 8-byte magic, little-endian `u32` dimension, then
//! that many little-endian `f32` values.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const VECTOR_MAGIC: &[u8; 8] = b"POIFEAT1";
const INDEX_FILE: &str = "index.jsonl";

pub fn encode_vector(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * values.len());
    out.extend_from_slice(VECTOR_MAGIC);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_vector(bytes: &[u8]) -> std::result::Result<Vec<f32>, String> {
    if bytes.len() < 12 || &bytes[..8] != VECTOR_MAGIC {
        return Err("bad magic".into());
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 12 + 4 * dim {
        return Err(format!("expected {} payload bytes, found {}", 4 * dim, bytes.len() - 12));
    }
    Ok(bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// Cache key for a prompt digest under a backend.
pub fn cache_key(backend_id: &str, prompt_digest: &str) -> String {
    let mut h = Sha256::new();
    h.update(backend_id.as_bytes());
    h.update([0u8]);
    h.update(prompt_digest.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub key: String,
    pub path: String,
    pub dim: usize,
    pub backend_id: String,
    /// sha256 of the vector file bytes.
    pub sha256: String,
}

#[derive(Debug)]
pub struct FeatureCache {
    dir: PathBuf,
    index: HashMap<String, IndexEntry>,
}

impl FeatureCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("vectors")).map_err(|e| Error::io(&dir, e))?;
        let mut index = HashMap::new();
        let index_path = dir.join(INDEX_FILE);
        if index_path.exists() {
            let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<IndexEntry>(line) {
                    Ok(e) => {
                        index.insert(e.key.clone(), e);
                    }
                    Err(e) => warn!("{}:{}: skipping bad index line: {e}", index_path.display(), i + 1),
                }
            }
        }
        Ok(FeatureCache { dir, index })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn entry(&self, backend_id: &str, prompt_digest: &str) -> Option<&IndexEntry> {
        self.index.get(&cache_key(backend_id, prompt_digest))
    }

    pub fn vector_path(&self, backend_id: &str, prompt_digest: &str) -> PathBuf {
        self.dir
            .join("vectors")
            .join(format!("{}.bin", cache_key(backend_id, prompt_digest)))
    }

    /// Reads a cached vector. Missing, corrupt or digest-mismatched entries
    /// come back as `None` (corrupt ones are dropped from the index).
    pub fn get(&mut self, backend_id: &str, prompt_digest: &str) -> Option<Vec<f32>> {
        let key = cache_key(backend_id, prompt_digest);
        let entry = self.index.get(&key)?.clone();
        let path = self.dir.join(&entry.path);
        let verdict = fs::read(&path)
            .map_err(|e| e.to_string())
            .and_then(|bytes| {
                let digest = hex::encode(Sha256::digest(&bytes));
                if digest != entry.sha256 {
                    return Err("digest mismatch".into());
                }
                decode_vector(&bytes)
            })
            .and_then(|v| {
                if v.len() == entry.dim {
                    Ok(v)
                } else {
                    Err(format!("dimension {} != indexed {}", v.len(), entry.dim))
                }
            });
        match verdict {
            Ok(v) => Some(v),
            Err(msg) => {
                warn!("discarding cache entry {key} ({}): {msg}", path.display());
                self.index.remove(&key);
                None
            }
        }
    }

    pub fn put(&mut self, backend_id: &str, prompt_digest: &str, values: &[f32]) -> Result<()> {
        let key = cache_key(backend_id, prompt_digest);
        let rel = format!("vectors/{key}.bin");
        let bytes = encode_vector(values);
        write_atomic(&self.dir.join(&rel), &bytes)?;
        let entry = IndexEntry {
            key: key.clone(),
            path: rel,
            dim: values.len(),
            backend_id: backend_id.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        };
        let index_path = self.dir.join(INDEX_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&index_path)
            .map_err(|e| Error::io(&index_path, e))?;
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(&index_path, e))?;
        self.index.insert(key, entry);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn vector_bytes_round_trip(values in proptest::collection::vec(any::<f32>(), 0..64)) {
            let back = decode_vector(&encode_vector(&values)).unwrap();
            let a: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn little_endian_layout() {
        let bytes = encode_vector(&[1.0, -2.5]);
        assert_eq!(&bytes[..8], b"POIFEAT1");
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[16..20], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn corrupt_entry_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let mut cache = FeatureCache::open(dir.path()).unwrap();
        cache.put("b", "d", &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(cache.get("b", "d"), Some(vec![1.0, 2.0, 3.0]));
        let path = cache.vector_path("b", "d");
        let mut bytes = fs::read(&path).unwrap();
        bytes[13] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        let mut reopened = FeatureCache::open(dir.path()).unwrap();
        assert_eq!(reopened.get("b", "d"), None);
        assert!(reopened.entry("b", "d").is_none());
    }
}

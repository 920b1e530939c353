//! Binary embedding cache.
//!
//! Data file: `b"PLPE"`, then little-endian `u32` version (1), `u32` dim,
//! `u32` count, then `count * dim` little-endian `f32`s. A sidecar text file
//! (`<data>.idx`) maps each key to its row, one `key<TAB>row` per line.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use sha2::{Digest, Sha256};

use super::EmbedError;
use crate::vector::EmbeddingVector;

pub const CACHE_MAGIC: &[u8; 4] = b"PLPE";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Hex SHA-256 over length-prefixed (model_id, preprocess_id, content).
pub fn cache_key(model_id: &str, preprocess_id: &str, content: &[u8]) -> String {
    let mut h = Sha256::new();
    for part in [model_id.as_bytes(), preprocess_id.as_bytes(), content] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Default)]
struct Rows {
    values: Vec<f32>,
    keys: Vec<String>,
    index: HashMap<String, usize>,
    dirty: bool,
}

/// In-memory view of one cache file; concurrent readers, exclusive writer.
#[derive(Debug)]
pub struct EmbeddingCache {
    path: PathBuf,
    dim: usize,
    rows: RwLock<Rows>,
}

fn index_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".idx");
    PathBuf::from(p)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

impl EmbeddingCache {
    /// Loads `path` if it exists, else starts empty.
    pub fn open(path: &Path, dim: usize) -> Result<Self, EmbedError> {
        let cache = Self {
            path: path.to_path_buf(),
            dim,
            rows: RwLock::new(Rows::default()),
        };
        if path.exists() {
            let rows = cache.read_files()?;
            *cache.rows.write().unwrap() = rows;
        }
        Ok(cache)
    }

    fn corrupt(&self, message: impl Into<String>) -> EmbedError {
        EmbedError::CorruptCache {
            path: self.path.clone(),
            message: message.into(),
        }
    }

    fn read_files(&self) -> Result<Rows, EmbedError> {
        let bytes = std::fs::read(&self.path).map_err(|e| EmbedError::io(&self.path, e))?;
        if bytes.len() < HEADER_LEN || &bytes[..4] != CACHE_MAGIC {
            return Err(self.corrupt("bad magic"));
        }
        let version = read_u32(&bytes, 4);
        if version != CACHE_VERSION {
            return Err(self.corrupt(format!("unsupported version {version}")));
        }
        let dim = read_u32(&bytes, 8) as usize;
        if dim != self.dim {
            return Err(self.corrupt(format!("dim {dim}, backend expects {}", self.dim)));
        }
        let count = read_u32(&bytes, 12) as usize;
        let expected = HEADER_LEN + count * dim * 4;
        if bytes.len() != expected {
            return Err(self.corrupt(format!("length {} != {expected} for {count} rows", bytes.len())));
        }
        let values: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let idx_path = index_path(&self.path);
        let text = std::fs::read_to_string(&idx_path).map_err(|e| EmbedError::io(&idx_path, e))?;
        let mut keys = vec![String::new(); count];
        let mut index = HashMap::with_capacity(count);
        for (n, line) in text.lines().enumerate() {
            let (key, row) = line
                .split_once('\t')
                .ok_or_else(|| self.corrupt(format!("index line {} has no tab", n + 1)))?;
            let row: usize = row
                .parse()
                .map_err(|_| self.corrupt(format!("index line {}: bad row", n + 1)))?;
            if row >= count || !keys[row].is_empty() || index.insert(key.to_string(), row).is_some() {
                return Err(self.corrupt(format!("index line {}: invalid or repeated entry", n + 1)));
            }
            keys[row] = key.to_string();
        }
        if index.len() != count {
            return Err(self.corrupt(format!("index has {} entries for {count} rows", index.len())));
        }
        Ok(Rows {
            values,
            keys,
            index,
            dirty: false,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.read().unwrap().keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored vector widened to `f64`; exact at 32-bit precision.
    pub fn get(&self, key: &str) -> Result<Option<EmbeddingVector>, EmbedError> {
        let rows = self.rows.read().unwrap();
        let Some(&row) = rows.index.get(key) else {
            return Ok(None);
        };
        let slice = &rows.values[row * self.dim..(row + 1) * self.dim];
        EmbeddingVector::from_unit_f32(slice)
            .map(Some)
            .map_err(|e| self.corrupt(format!("row {row}: {e}")))
    }

    /// Inserts unless the key is already present.
    pub fn put(&self, key: &str, v: &EmbeddingVector) -> Result<(), EmbedError> {
        if key.is_empty() {
            return Err(EmbedError::Config("empty cache key".into()));
        }
        if v.dim() != self.dim {
            return Err(EmbedError::Dimension {
                expected: self.dim,
                got: v.dim(),
            });
        }
        let mut rows = self.rows.write().unwrap();
        if rows.index.contains_key(key) {
            return Ok(());
        }
        let row = rows.keys.len();
        rows.values.extend(v.to_f32());
        rows.keys.push(key.to_string());
        rows.index.insert(key.to_string(), row);
        rows.dirty = true;
        Ok(())
    }

    /// Rewrites both files if anything changed since the last flush.
    pub fn flush(&self) -> Result<(), EmbedError> {
        let mut rows = self.rows.write().unwrap();
        if !rows.dirty {
            return Ok(());
        }
        let mut data = Vec::with_capacity(HEADER_LEN + rows.values.len() * 4);
        data.extend_from_slice(CACHE_MAGIC);
        data.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        data.extend_from_slice(&(self.dim as u32).to_le_bytes());
        data.extend_from_slice(&(rows.keys.len() as u32).to_le_bytes());
        for v in &rows.values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        let mut index = Vec::new();
        for (row, key) in rows.keys.iter().enumerate() {
            writeln!(index, "{key}\t{row}").expect("write to Vec");
        }
        let idx_path = index_path(&self.path);
        write_atomic(&self.path, &data)?;
        write_atomic(&idx_path, &index)?;
        rows.dirty = false;
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EmbedError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| EmbedError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| EmbedError::io(path, e))
}

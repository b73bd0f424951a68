//! Feature cache: raw little-endian `f32` vectors plus a JSON index.
//!
//! ```text
//! <dir>/features.bin   concatenated vectors
//! <dir>/index.json     {"format_version":1,"dtype":"f32le","entries":[{"id":..,"offset":..,"dim":..,"tag":..}]}
//! ```
//! `offset` is a byte offset into `features.bin`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{decode_le, encode_le, Scalar};

pub const CACHE_BLOB: &str = "features.bin";
pub const CACHE_INDEX: &str = "index.json";
const CACHE_VERSION: u32 = 1;
const CACHE_DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub id: String,
    pub offset: u64,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheIndex {
    format_version: u32,
    dtype: String,
    entries: Vec<CacheEntry>,
}

/// Accumulates vectors and writes the cache in one go.
#[derive(Debug)]
pub struct FeatureCacheWriter {
    dir: PathBuf,
    blob: Vec<u8>,
    entries: Vec<CacheEntry>,
}

impl FeatureCacheWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FeatureCacheWriter {
            dir: dir.into(),
            blob: Vec::new(),
            entries: Vec::new(),
        }
    }

    /// Appends a vector, narrowing to `f32`.
    pub fn push<T: Scalar>(&mut self, id: impl Into<String>, tag: Option<String>, values: &[T]) {
        let narrowed: Vec<f32> = values.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        self.entries.push(CacheEntry {
            id: id.into(),
            offset: self.blob.len() as u64,
            dim: values.len(),
            tag,
        });
        self.blob.extend_from_slice(&encode_le(&narrowed));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn finish(self) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let blob_path = self.dir.join(CACHE_BLOB);
        let index_path = self.dir.join(CACHE_INDEX);
        write_atomic(&blob_path, &self.blob)?;
        let index = CacheIndex {
            format_version: CACHE_VERSION,
            dtype: CACHE_DTYPE.into(),
            entries: self.entries,
        };
        write_atomic(&index_path, (serde_json::to_string_pretty(&index)? + "\n").as_bytes())?;
        Ok(self.dir)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A loaded feature cache.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    entries: Vec<CacheEntry>,
    by_id: HashMap<String, usize>,
    data: Vec<f32>,
}

impl FeatureCache {
    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.by_id.get(id).map(|&i| self.slice(i))
    }

    fn slice(&self, i: usize) -> &[f32] {
        let e = &self.entries[i];
        let start = e.offset as usize / 4;
        &self.data[start..start + e.dim]
    }

    /// Vector `id` converted to `T`.
    pub fn vector<T: Scalar>(&self, id: &str) -> Result<Array1<T>> {
        let raw = self
            .get(id)
            .ok_or_else(|| Error::Format(format!("feature `{id}` is not in the cache")))?;
        Ok(raw.iter().map(|&x| T::lit(x as f64)).collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CacheEntry, &[f32])> {
        self.entries.iter().enumerate().map(|(i, e)| (e, self.slice(i)))
    }
}

pub fn read_feature_cache(dir: &Path) -> Result<FeatureCache> {
    let index_path = dir.join(CACHE_INDEX);
    let blob_path = dir.join(CACHE_BLOB);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: CacheIndex = serde_json::from_str(&text)?;
    if index.format_version != CACHE_VERSION {
        return Err(Error::Version {
            expected: CACHE_VERSION,
            found: index.format_version,
        });
    }
    if index.dtype != CACHE_DTYPE {
        return Err(Error::Format(format!("unsupported cache dtype `{}`", index.dtype)));
    }
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let data: Vec<f32> = decode_le(&bytes).ok_or_else(|| Error::Format("feature blob length is not a multiple of 4".into()))?;
    let mut by_id = HashMap::with_capacity(index.entries.len());
    for (i, e) in index.entries.iter().enumerate() {
        if e.offset % 4 != 0 || (e.offset as usize / 4 + e.dim) > data.len() {
            return Err(Error::Format(format!("cache entry `{}` points outside the blob", e.id)));
        }
        if by_id.insert(e.id.clone(), i).is_some() {
            return Err(Error::Format(format!("duplicate cache id `{}`", e.id)));
        }
    }
    Ok(FeatureCache {
        entries: index.entries,
        by_id,
        data,
    })
}

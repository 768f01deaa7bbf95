// SPDX-License-Identifier: Apache-2.0

//! Storage for materialized cache bytes.
//!
//! On-disk layout, stable for operators:
//!
//! ```text
//! <cache_root>/<sha256(key)>/data        the cached bytes
//! <cache_root>/<sha256(key)>/meta.json   {key, size, usage_count, last_access, ...}
//! ```
//!
//! where `key` is the JSON array `[provider, identifier, source_url]`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::repository::FileEntry;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub provider: String,
    pub identifier: String,
    pub source_url: String,
}

impl CacheKey {
    pub fn of(entry: &FileEntry) -> Self {
        Self {
            provider: entry.provider.clone(),
            identifier: entry.identifier.clone(),
            source_url: entry.source_url.clone(),
        }
    }

    pub fn canonical(&self) -> String {
        serde_json::to_string(&[&self.provider, &self.identifier, &self.source_url]).expect("strings serialize")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.provider, self.source_url)
    }
}

/// Sidecar metadata persisted next to the bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub key: CacheKey,
    pub size: u64,
    pub usage_count: u64,
    pub last_access: DateTime<Utc>,
    #[serde(default)]
    pub usage_frequency: f64,
}

pub trait BlobStore: Send + Sync + std::fmt::Debug {
    fn write(&self, meta: &CacheMeta, bytes: &[u8]) -> io::Result<()>;
    fn read(&self, key: &CacheKey, offset: u64, len: u64) -> io::Result<Vec<u8>>;
    fn update_meta(&self, meta: &CacheMeta) -> io::Result<()>;
    fn remove(&self, key: &CacheKey) -> io::Result<()>;
    /// Everything currently stored, used to rebuild the index on startup.
    fn scan(&self) -> io::Result<Vec<CacheMeta>>;
    fn location(&self, key: &CacheKey) -> Option<PathBuf>;
}

#[derive(Debug)]
pub struct DirBlobStore {
    root: PathBuf,
}

impl DirBlobStore {
    pub fn new(root: impl AsRef<Path>) -> io::Result<Self> {
        fs::create_dir_all(root.as_ref())?;
        Ok(Self {
            root: root.as_ref().to_path_buf(),
        })
    }

    fn dir(&self, key: &CacheKey) -> PathBuf {
        self.root.join(key.digest())
    }

    fn write_meta(dir: &Path, meta: &CacheMeta) -> io::Result<()> {
        let tmp = dir.join("meta.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(meta)?)?;
        fs::rename(tmp, dir.join("meta.json"))
    }
}

impl BlobStore for DirBlobStore {
    fn write(&self, meta: &CacheMeta, bytes: &[u8]) -> io::Result<()> {
        let dir = self.dir(&meta.key);
        fs::create_dir_all(&dir)?;
        let tmp = dir.join("data.tmp");
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(tmp, dir.join("data"))?;
        Self::write_meta(&dir, meta)
    }

    fn read(&self, key: &CacheKey, offset: u64, len: u64) -> io::Result<Vec<u8>> {
        let mut f = File::open(self.dir(key).join("data"))?;
        f.seek(SeekFrom::Start(offset))?;
        let mut buf = Vec::new();
        f.take(len).read_to_end(&mut buf)?;
        Ok(buf)
    }

    fn update_meta(&self, meta: &CacheMeta) -> io::Result<()> {
        Self::write_meta(&self.dir(&meta.key), meta)
    }

    fn remove(&self, key: &CacheKey) -> io::Result<()> {
        match fs::remove_dir_all(self.dir(key)) {
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            other => other,
        }
    }

    fn scan(&self) -> io::Result<Vec<CacheMeta>> {
        let mut out = Vec::new();
        for dent in fs::read_dir(&self.root)? {
            let dir = dent?.path();
            let (meta, data) = (dir.join("meta.json"), dir.join("data"));
            if !meta.is_file() || !data.is_file() {
                log::warn!("ignoring incomplete cache entry {}", dir.display());
                continue;
            }
            match serde_json::from_slice::<CacheMeta>(&fs::read(&meta)?) {
                Ok(m) if fs::metadata(&data)?.len() == m.size && dir.file_name() == Some(m.key.digest().as_ref()) => {
                    out.push(m)
                }
                _ => log::warn!("ignoring inconsistent cache entry {}", dir.display()),
            }
        }
        out.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(out)
    }

    fn location(&self, key: &CacheKey) -> Option<PathBuf> {
        Some(self.dir(key).join("data"))
    }
}

#[derive(Debug, Default)]
pub struct MemBlobStore {
    blobs: RwLock<HashMap<CacheKey, (CacheMeta, Vec<u8>)>>,
}

impl MemBlobStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl BlobStore for MemBlobStore {
    fn write(&self, meta: &CacheMeta, bytes: &[u8]) -> io::Result<()> {
        self.blobs
            .write()
            .insert(meta.key.clone(), (meta.clone(), bytes.to_vec()));
        Ok(())
    }

    fn read(&self, key: &CacheKey, offset: u64, len: u64) -> io::Result<Vec<u8>> {
        let blobs = self.blobs.read();
        let (_, bytes) = blobs
            .get(key)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, key.to_string()))?;
        let end = (offset.saturating_add(len) as usize).min(bytes.len());
        let start = (offset as usize).min(end);
        Ok(bytes[start..end].to_vec())
    }

    fn update_meta(&self, meta: &CacheMeta) -> io::Result<()> {
        if let Some(slot) = self.blobs.write().get_mut(&meta.key) {
            slot.0 = meta.clone();
        }
        Ok(())
    }

    fn remove(&self, key: &CacheKey) -> io::Result<()> {
        self.blobs.write().remove(key);
        Ok(())
    }

    fn scan(&self) -> io::Result<Vec<CacheMeta>> {
        let mut out: Vec<_> = self.blobs.read().values().map(|(m, _)| m.clone()).collect();
        out.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(out)
    }

    fn location(&self, _key: &CacheKey) -> Option<PathBuf> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(url: &str, size: u64) -> CacheMeta {
        CacheMeta {
            key: CacheKey {
                provider: "mock".into(),
                identifier: "mock:ds".into(),
                source_url: url.into(),
            },
            size,
            usage_count: 1,
            last_access: Utc::now(),
            usage_frequency: 0.0,
        }
    }

    #[test]
    fn dir_layout_matches_documented_shape() {
        let tmp = tempfile::tempdir().unwrap();
        let store = DirBlobStore::new(tmp.path()).unwrap();
        let m = meta("mock://ds/a", 4);
        store.write(&m, b"abcd").unwrap();
        let dir = tmp
            .path()
            .join(hex::encode(Sha256::digest(br#"["mock","mock:ds","mock://ds/a"]"#)));
        assert_eq!(fs::read(dir.join("data")).unwrap(), b"abcd");
        let side: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("meta.json")).unwrap()).unwrap();
        for field in ["key", "size", "usage_count", "last_access"] {
            assert!(side.get(field).is_some(), "meta.json lacks {field}");
        }
        assert_eq!(store.read(&m.key, 1, 2).unwrap(), b"bc");
        assert_eq!(store.scan().unwrap(), vec![m.clone()]);
        store.remove(&m.key).unwrap();
        assert!(store.scan().unwrap().is_empty());
    }
}

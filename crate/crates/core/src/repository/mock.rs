// SPDX-License-Identifier: Apache-2.0

//! In-memory fixture provider (`mock:` identifiers).
//!
//! Fixture JSON:
//!
//! ```json
//! { "datasets": { "ds1": { "name": "ds1",
//!                          "entries": [{"path": "a.csv", "size": 10, "content_b64": "..."}],
//!                          "sub": ["ds2"] } } }
//! ```
//!
//! `content_b64` may be omitted, in which case `size` deterministic
//! pseudo-random bytes are generated from the path. An explicit
//! `checksum` overrides the computed one (used to model corrupted
//! sources).

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};

use base64::Engine as _;
use parking_lot::RwLock;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{sha256_digest, DatasetDescriptor, FileEntry, Provider, ProviderError, Result};
use crate::catalog::Protocol;

const SCHEME: &str = "mock:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockFile {
    pub path: String,
    pub content: Vec<u8>,
    pub checksum: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MockDataset {
    pub name: String,
    pub files: Vec<MockFile>,
    pub sub: Vec<String>,
}

impl MockDataset {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            ..Self::default()
        }
    }

    pub fn file(mut self, path: &str, content: Vec<u8>) -> Self {
        self.files.push(MockFile {
            path: path.to_string(),
            content,
            checksum: None,
        });
        self
    }

    /// A file of `size` deterministic bytes derived from `path`.
    pub fn generated_file(self, path: &str, size: usize) -> Self {
        let content = generated_content(path, size);
        self.file(path, content)
    }

    pub fn with_sub(mut self, identifier: &str) -> Self {
        self.sub.push(normalize(identifier));
        self
    }
}

/// Deterministic filler bytes for fixtures without explicit content.
pub fn generated_content(seed: &str, size: usize) -> Vec<u8> {
    let digest = Sha256::digest(seed.as_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut out = vec![0u8; size];
    rng.fill_bytes(&mut out);
    out
}

fn normalize(identifier: &str) -> String {
    if identifier.contains(':') {
        identifier.to_string()
    } else {
        format!("{SCHEME}{identifier}")
    }
}

#[derive(Deserialize)]
struct FixtureFile {
    datasets: BTreeMap<String, FixtureDataset>,
}

#[derive(Deserialize)]
struct FixtureDataset {
    name: Option<String>,
    #[serde(default)]
    entries: Vec<FixtureEntry>,
    #[serde(default)]
    sub: Vec<String>,
}

#[derive(Deserialize)]
struct FixtureEntry {
    path: String,
    size: u64,
    content_b64: Option<String>,
    checksum: Option<String>,
}

pub struct MockProvider {
    name: String,
    datasets: RwLock<BTreeMap<String, MockDataset>>,
    unavailable: AtomicBool,
    failures_pending: AtomicU32,
}

impl std::fmt::Debug for MockProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockProvider")
            .field("name", &self.name)
            .field("datasets", &self.datasets.read().len())
            .finish()
    }
}

impl MockProvider {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            datasets: RwLock::new(BTreeMap::new()),
            unavailable: AtomicBool::new(false),
            failures_pending: AtomicU32::new(0),
        }
    }

    pub fn from_json(name: &str, json: &str) -> Result<Self> {
        let fixture: FixtureFile =
            serde_json::from_str(json).map_err(|e| ProviderError::InvalidFixture(e.to_string()))?;
        let provider = Self::new(name);
        for (id, ds) in fixture.datasets {
            let mut dataset = MockDataset::new(ds.name.as_deref().unwrap_or(&id));
            for entry in ds.entries {
                let content = match entry.content_b64 {
                    Some(b64) => base64::engine::general_purpose::STANDARD
                        .decode(b64.as_bytes())
                        .map_err(|e| ProviderError::InvalidFixture(format!("{id}/{}: {e}", entry.path)))?,
                    None => generated_content(&format!("{id}/{}", entry.path), entry.size as usize),
                };
                if content.len() as u64 != entry.size {
                    return Err(ProviderError::InvalidFixture(format!(
                        "{id}/{}: size {} but content has {} bytes",
                        entry.path,
                        entry.size,
                        content.len()
                    )));
                }
                dataset.files.push(MockFile {
                    path: entry.path,
                    content,
                    checksum: entry.checksum,
                });
            }
            dataset.sub = ds.sub.iter().map(|s| normalize(s)).collect();
            provider.insert(&id, dataset);
        }
        Ok(provider)
    }

    pub fn from_path(name: &str, path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ProviderError::InvalidFixture(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(name, &text)
    }

    /// Adds or replaces a dataset. `id` may omit the `mock:` prefix.
    pub fn insert(&self, id: &str, dataset: MockDataset) {
        self.datasets.write().insert(normalize(id), dataset);
    }

    /// Retracts a dataset; later resolves and reads of it fail.
    pub fn remove(&self, id: &str) -> Option<MockDataset> {
        self.datasets.write().remove(&normalize(id))
    }

    pub fn dataset(&self, id: &str) -> Option<MockDataset> {
        self.datasets.read().get(&normalize(id)).cloned()
    }

    /// Replaces a file's bytes in place while keeping its advertised
    /// checksum, simulating a corrupted source.
    pub fn corrupt(&self, id: &str, path: &str, content: Vec<u8>) -> bool {
        let mut sets = self.datasets.write();
        let Some(ds) = sets.get_mut(&normalize(id)) else {
            return false;
        };
        let Some(file) = ds.files.iter_mut().find(|f| f.path == path) else {
            return false;
        };
        if file.checksum.is_none() {
            file.checksum = Some(sha256_digest(&file.content));
        }
        file.content = content;
        true
    }

    pub fn set_unavailable(&self, down: bool) {
        self.unavailable.store(down, Ordering::SeqCst);
    }

    /// The next `n` reads fail with a retryable `TransferFailed`.
    pub fn fail_next_reads(&self, n: u32) {
        self.failures_pending.store(n, Ordering::SeqCst);
    }

    fn source_url(id: &str, path: &str) -> String {
        format!("mock://{}/{}", id.trim_start_matches(SCHEME), path)
    }

    fn check_up(&self) -> Result<()> {
        if self.unavailable.load(Ordering::SeqCst) {
            Err(ProviderError::ProviderUnavailable(self.name.clone()))
        } else {
            Ok(())
        }
    }
}

impl Provider for MockProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn schemes(&self) -> Vec<String> {
        vec![SCHEME.to_string()]
    }

    fn protocols(&self) -> Vec<Protocol> {
        vec![Protocol::Mock]
    }

    fn describe(&self, identifier: &str) -> Result<Option<DatasetDescriptor>> {
        self.check_up()?;
        let sets = self.datasets.read();
        let Some(ds) = sets.get(identifier) else {
            return Ok(None);
        };
        let entries: Vec<FileEntry> = ds
            .files
            .iter()
            .map(|f| FileEntry {
                original_name: f.path.rsplit('/').next().unwrap_or(&f.path).to_string(),
                relative_path: f.path.clone(),
                size: f.content.len() as u64,
                source_url: Self::source_url(identifier, &f.path),
                protocol: Protocol::Mock,
                provider: self.name.clone(),
                identifier: identifier.to_string(),
                checksum: Some(f.checksum.clone().unwrap_or_else(|| sha256_digest(&f.content))),
            })
            .collect();
        Ok(Some(DatasetDescriptor {
            identifier: identifier.to_string(),
            name: ds.name.clone(),
            provider: self.name.clone(),
            total_size: entries.iter().map(|e| e.size).sum(),
            entries,
            sub_datasets: ds.sub.clone(),
        }))
    }

    fn read(&self, entry: &FileEntry, range: Range<u64>) -> Result<Vec<u8>> {
        self.check_up()?;
        let pending = self.failures_pending.load(Ordering::SeqCst);
        if pending > 0
            && self
                .failures_pending
                .compare_exchange(pending, pending - 1, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
        {
            return Err(ProviderError::TransferFailed(format!(
                "injected failure for {}",
                entry.source_url
            )));
        }
        let rest = entry
            .source_url
            .strip_prefix("mock://")
            .ok_or_else(|| ProviderError::SourceNotFound(entry.source_url.clone()))?;
        let (ds_id, path) = rest
            .split_once('/')
            .ok_or_else(|| ProviderError::SourceNotFound(entry.source_url.clone()))?;
        let sets = self.datasets.read();
        let file = sets
            .get(&normalize(ds_id))
            .and_then(|ds| ds.files.iter().find(|f| f.path == path))
            .ok_or_else(|| ProviderError::SourceNotFound(entry.source_url.clone()))?;
        let len = file.content.len() as u64;
        let end = range.end.min(len);
        let start = range.start.min(end);
        Ok(file.content[start as usize..end as usize].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fixture_json() {
        let json = r#"{"datasets": {
            "ds1": {"name": "Dataset One",
                    "entries": [{"path": "a.csv", "size": 3, "content_b64": "YWJj"},
                                {"path": "sub/b.bin", "size": 16}],
                    "sub": ["ds2"]},
            "ds2": {"entries": []}
        }}"#;
        let p = MockProvider::from_json("mock", json).unwrap();
        let d = p.describe("mock:ds1").unwrap().unwrap();
        assert_eq!(d.name, "Dataset One");
        assert_eq!(d.sub_datasets, vec!["mock:ds2"]);
        assert_eq!(d.entries[0].original_name, "a.csv");
        assert_eq!(d.entries[1].original_name, "b.bin");
        assert_eq!(d.entries[1].relative_path, "sub/b.bin");
        assert_eq!(p.read(&d.entries[0], 0..3).unwrap(), b"abc");
        assert_eq!(
            p.read(&d.entries[1], 0..16).unwrap(),
            generated_content("ds1/sub/b.bin", 16)
        );
        assert_eq!(p.describe("mock:ds2").unwrap().unwrap().name, "ds2");
        assert!(p.describe("mock:nope").unwrap().is_none());
    }

    #[test]
    fn size_mismatch_rejected() {
        let json = r#"{"datasets": {"x": {"entries": [{"path": "a", "size": 5, "content_b64": "YWJj"}]}}}"#;
        assert!(matches!(
            MockProvider::from_json("mock", json),
            Err(ProviderError::InvalidFixture(_))
        ));
    }

    #[test]
    fn generated_content_is_stable() {
        assert_eq!(generated_content("k", 64), generated_content("k", 64));
        assert_ne!(generated_content("k", 64), generated_content("j", 64));
    }
}

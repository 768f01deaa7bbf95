// SPDX-License-Identifier: Apache-2.0

//! Data-provider layer.
//!
//! A [`Provider`] turns a dataset identifier (`mock:ds1`, `file:/data`,
//! `https://host/file.csv`) into a [`DatasetDescriptor`] and reads byte
//! ranges of the files it describes. The [`ProviderRegistry`] owns the
//! registered providers, dispatches identifiers by scheme in registration
//! order, retries transient transfer failures, verifies checksums and
//! counts every byte pulled from each provider.

mod http;
mod local;
mod mock;

use std::collections::HashSet;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{Protocol, ProvenanceRecord};
use crate::error::ErrorCode;

pub use http::HttpProvider;
pub use local::LocalProvider;
pub use mock::{generated_content, MockDataset, MockFile, MockProvider};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub original_name: String,
    pub relative_path: String,
    pub size: u64,
    pub source_url: String,
    pub protocol: Protocol,
    /// Name of the provider that described this entry.
    pub provider: String,
    /// Identifier of the dataset this entry belongs to.
    pub identifier: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

impl FileEntry {
    pub fn provenance(&self) -> ProvenanceRecord {
        ProvenanceRecord {
            source_url: self.source_url.clone(),
            protocol: self.protocol.clone(),
            provider: self.provider.clone(),
            identifier: self.identifier.clone(),
            original_name: self.original_name.clone(),
            checksum: self.checksum.clone(),
        }
    }

    pub fn from_provenance(p: &ProvenanceRecord, size: u64) -> Self {
        Self {
            original_name: p.original_name.clone(),
            relative_path: p.original_name.clone(),
            size,
            source_url: p.source_url.clone(),
            protocol: p.protocol.clone(),
            provider: p.provider.clone(),
            identifier: p.identifier.clone(),
            checksum: p.checksum.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub identifier: String,
    pub name: String,
    pub provider: String,
    /// Own entries plus every resolved sub-dataset.
    pub total_size: u64,
    pub entries: Vec<FileEntry>,
    pub sub_datasets: Vec<String>,
}

impl DatasetDescriptor {
    pub fn own_size(&self) -> u64 {
        self.entries.iter().map(|e| e.size).sum()
    }
}

/// A descriptor together with its recursively resolved sub-datasets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetTree {
    pub descriptor: DatasetDescriptor,
    pub children: Vec<DatasetTree>,
}

impl DatasetTree {
    pub fn file_count(&self) -> usize {
        self.descriptor.entries.len() + self.children.iter().map(DatasetTree::file_count).sum::<usize>()
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum ProviderError {
    #[error("no provider recognizes identifier {0:?}")]
    UnknownIdentifier(String),
    #[error("provider {0} is unavailable")]
    ProviderUnavailable(String),
    #[error("transfer failed: {0}")]
    TransferFailed(String),
    #[error("source {0} no longer exists")]
    SourceNotFound(String),
    #[error("checksum mismatch for {url}: expected {expected}, got {actual}")]
    ChecksumMismatch {
        url: String,
        expected: String,
        actual: String,
    },
    #[error("no transfer adapter for protocol {0}")]
    UnsupportedProtocol(String),
    #[error("provider {0} is already registered")]
    DuplicateProvider(String),
    #[error("dataset {0} references itself through its sub-datasets")]
    CyclicDataset(String),
    #[error("range {start}..{end} is outside a {size}-byte file")]
    InvalidRange { start: u64, end: u64, size: u64 },
    #[error("invalid fixture: {0}")]
    InvalidFixture(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::TransferFailed(_))
    }
}

impl ErrorCode for ProviderError {
    fn code(&self) -> &'static str {
        match self {
            ProviderError::UnknownIdentifier(_) => "UnknownIdentifier",
            ProviderError::ProviderUnavailable(_) => "ProviderUnavailable",
            ProviderError::TransferFailed(_) => "TransferFailed",
            ProviderError::SourceNotFound(_) => "SourceNotFound",
            ProviderError::ChecksumMismatch { .. } => "ChecksumMismatch",
            ProviderError::UnsupportedProtocol(_) => "UnsupportedProtocol",
            ProviderError::DuplicateProvider(_) => "DuplicateProvider",
            ProviderError::CyclicDataset(_) => "CyclicDataset",
            ProviderError::InvalidRange { .. } => "InvalidRange",
            ProviderError::InvalidFixture(_) => "InvalidFixture",
        }
    }
}

pub type Result<T, E = ProviderError> = std::result::Result<T, E>;

/// One external data source.
///
/// `describe` returns `Ok(None)` when the identifier has the right scheme
/// but names nothing this provider knows; the registry then tries the next
/// provider. `describe` must not transfer file contents.
pub trait Provider: Send + Sync {
    fn name(&self) -> &str;
    /// Identifier prefixes this provider answers for, e.g. `"mock:"`.
    fn schemes(&self) -> Vec<String>;
    fn protocols(&self) -> Vec<Protocol>;
    /// Shallow descriptor; `total_size` covers own entries only.
    fn describe(&self, identifier: &str) -> Result<Option<DatasetDescriptor>>;
    /// Reads `range` of the entry. `range` is already clamped to the size.
    fn read(&self, entry: &FileEntry, range: Range<u64>) -> Result<Vec<u8>>;
}

/// Placeholder for federated transfer services (Globus-style). Accepts its
/// schemes and always reports itself unavailable.
#[derive(Debug, Clone)]
pub struct StubProvider {
    name: String,
    schemes: Vec<String>,
    protocol: Protocol,
}

impl StubProvider {
    pub fn new(name: &str, schemes: &[&str], protocol: &str) -> Self {
        Self {
            name: name.to_string(),
            schemes: schemes.iter().map(|s| s.to_string()).collect(),
            protocol: Protocol::from(protocol),
        }
    }
}

impl Provider for StubProvider {
    fn name(&self) -> &str {
        &self.name
    }
    fn schemes(&self) -> Vec<String> {
        self.schemes.clone()
    }
    fn protocols(&self) -> Vec<Protocol> {
        vec![self.protocol.clone()]
    }
    fn describe(&self, _identifier: &str) -> Result<Option<DatasetDescriptor>> {
        Err(ProviderError::ProviderUnavailable(self.name.clone()))
    }
    fn read(&self, _entry: &FileEntry, _range: Range<u64>) -> Result<Vec<u8>> {
        Err(ProviderError::ProviderUnavailable(self.name.clone()))
    }
}

/// A registered provider plus its transfer accounting.
pub struct ProviderBinding {
    provider: Arc<dyn Provider>,
    schemes: Vec<String>,
    transferred: AtomicU64,
}

impl ProviderBinding {
    pub fn name(&self) -> &str {
        self.provider.name()
    }

    pub fn identifier_schemes(&self) -> &[String] {
        &self.schemes
    }

    /// Total bytes read from this provider. Never decreases.
    pub fn transfer_counter(&self) -> u64 {
        self.transferred.load(Ordering::SeqCst)
    }

    fn matches(&self, identifier: &str) -> bool {
        self.schemes.iter().any(|s| identifier.starts_with(s.as_str()))
    }
}

impl std::fmt::Debug for ProviderBinding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProviderBinding")
            .field("name", &self.name())
            .field("schemes", &self.schemes)
            .field("transferred", &self.transfer_counter())
            .finish()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retries: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            initial_backoff: Duration::from_millis(100),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            retries: 0,
            initial_backoff: Duration::ZERO,
        }
    }

    /// Backoff before retry `attempt` (0-based): 100 ms, 200 ms, 400 ms.
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(attempt)
    }
}

/// `sha256:<hex>` digest of `bytes`.
pub fn sha256_digest(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

fn verify_checksum(entry: &FileEntry, bytes: &[u8]) -> Result<()> {
    let Some(expected) = &entry.checksum else {
        return Ok(());
    };
    if !expected.starts_with("sha256:") {
        log::debug!("skipping unsupported checksum {expected} for {}", entry.source_url);
        return Ok(());
    }
    let actual = sha256_digest(bytes);
    if &actual == expected {
        Ok(())
    } else {
        Err(ProviderError::ChecksumMismatch {
            url: entry.source_url.clone(),
            expected: expected.clone(),
            actual,
        })
    }
}

#[derive(Default)]
pub struct ProviderRegistry {
    bindings: RwLock<Vec<Arc<ProviderBinding>>>,
    retry: RetryPolicy,
}

impl std::fmt::Debug for ProviderRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.bindings.read().iter()).finish()
    }
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_retry(retry: RetryPolicy) -> Self {
        Self {
            bindings: RwLock::default(),
            retry,
        }
    }

    pub fn register_provider(&self, provider: Arc<dyn Provider>) -> Result<Arc<ProviderBinding>> {
        let mut bindings = self.bindings.write();
        if bindings.iter().any(|b| b.name() == provider.name()) {
            return Err(ProviderError::DuplicateProvider(provider.name().to_string()));
        }
        let binding = Arc::new(ProviderBinding {
            schemes: provider.schemes(),
            provider,
            transferred: AtomicU64::new(0),
        });
        bindings.push(binding.clone());
        Ok(binding)
    }

    pub fn binding(&self, name: &str) -> Option<Arc<ProviderBinding>> {
        self.bindings.read().iter().find(|b| b.name() == name).cloned()
    }

    pub fn bindings(&self) -> Vec<Arc<ProviderBinding>> {
        self.bindings.read().clone()
    }

    /// Sum of all provider transfer counters.
    pub fn total_transferred(&self) -> u64 {
        self.bindings.read().iter().map(|b| b.transfer_counter()).sum()
    }

    fn describe(&self, identifier: &str) -> Result<DatasetDescriptor> {
        let bindings = self.bindings.read().clone();
        let mut unavailable = None;
        for binding in bindings.iter().filter(|b| b.matches(identifier)) {
            match binding.provider.describe(identifier) {
                Ok(Some(desc)) => return Ok(desc),
                Ok(None) => {}
                Err(e @ ProviderError::ProviderUnavailable(_)) => {
                    unavailable.get_or_insert(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(unavailable.unwrap_or_else(|| ProviderError::UnknownIdentifier(identifier.to_string())))
    }

    /// Resolves `identifier`; `total_size` includes all sub-datasets.
    pub fn resolve(&self, identifier: &str) -> Result<DatasetDescriptor> {
        let tree = self.resolve_tree(identifier)?;
        Ok(tree.descriptor)
    }

    /// Resolves `identifier` and, recursively, every sub-dataset it
    /// references. A dataset that appears among its own ancestors is
    /// rejected with `CyclicDataset`; shared sub-datasets are fine.
    pub fn resolve_tree(&self, identifier: &str) -> Result<DatasetTree> {
        let mut ancestry = HashSet::new();
        self.resolve_rec(identifier, &mut ancestry)
    }

    fn resolve_rec(&self, identifier: &str, ancestry: &mut HashSet<String>) -> Result<DatasetTree> {
        if !ancestry.insert(identifier.to_string()) {
            return Err(ProviderError::CyclicDataset(identifier.to_string()));
        }
        let mut descriptor = self.describe(identifier)?;
        let mut children = Vec::with_capacity(descriptor.sub_datasets.len());
        for sub in &descriptor.sub_datasets {
            children.push(self.resolve_rec(sub, ancestry)?);
        }
        ancestry.remove(identifier);
        descriptor.total_size = descriptor.own_size() + children.iter().map(|c| c.descriptor.total_size).sum::<u64>();
        Ok(DatasetTree { descriptor, children })
    }

    fn adapter_for(&self, entry: &FileEntry) -> Result<Arc<ProviderBinding>> {
        let bindings = self.bindings.read();
        let supports = |b: &&Arc<ProviderBinding>| b.provider.protocols().contains(&entry.protocol);
        bindings
            .iter()
            .filter(supports)
            .find(|b| b.name() == entry.provider)
            .or_else(|| bindings.iter().find(supports))
            .cloned()
            .ok_or_else(|| ProviderError::UnsupportedProtocol(entry.protocol.to_string()))
    }

    /// Fetches `range` (whole file when `None`) of `entry`.
    ///
    /// Transient failures are retried per the registry's [`RetryPolicy`].
    /// The checksum is verified whenever the whole file is fetched.
    pub fn fetch(&self, entry: &FileEntry, range: Option<Range<u64>>) -> Result<Vec<u8>> {
        let binding = self.adapter_for(entry)?;
        let range = range.unwrap_or(0..entry.size);
        if range.start > range.end || range.start > entry.size {
            return Err(ProviderError::InvalidRange {
                start: range.start,
                end: range.end,
                size: entry.size,
            });
        }
        let range = range.start..range.end.min(entry.size);
        if range.is_empty() {
            return Ok(Vec::new());
        }
        let mut attempt = 0;
        let bytes = loop {
            match binding.provider.read(entry, range.clone()) {
                Ok(bytes) => break bytes,
                Err(e) if e.is_retryable() && attempt < self.retry.retries => {
                    let wait = self.retry.backoff(attempt);
                    log::warn!("fetch of {} failed ({e}), retrying in {wait:?}", entry.source_url);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        binding.transferred.fetch_add(bytes.len() as u64, Ordering::SeqCst);
        if bytes.len() as u64 != range.end - range.start {
            return Err(ProviderError::TransferFailed(format!(
                "short read from {}: wanted {} bytes, got {}",
                entry.source_url,
                range.end - range.start,
                bytes.len()
            )));
        }
        if range.start == 0 && range.end == entry.size {
            verify_checksum(entry, &bytes)?;
        }
        Ok(bytes)
    }
}

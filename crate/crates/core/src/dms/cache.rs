// SPDX-License-Identifier: Apache-2.0

//! Storage-bounded cache of provider bytes.
//!
//! Entries move `Absent -> Transferring -> Present` when first opened and
//! back to `Absent` when evicted; usage statistics survive eviction. An
//! entry with a nonzero lock count is never evicted. When space is needed,
//! unlocked `Present` entries are ranked by an [`EvictionScorer`] and the
//! lowest scores go first.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::blob::{BlobStore, CacheKey, CacheMeta};
use super::DmsError;
use crate::clock::SharedClock;
use crate::repository::{FileEntry, ProviderRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvictionWeights {
    pub count: f64,
    pub frequency: f64,
    pub recency: f64,
}

impl Default for EvictionWeights {
    fn default() -> Self {
        Self {
            count: 1.0,
            frequency: 1.0,
            recency: 1.0,
        }
    }
}

impl EvictionWeights {
    /// Pure recency: evicts in least-recently-used order.
    pub fn lru() -> Self {
        Self {
            count: 0.0,
            frequency: 0.0,
            recency: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StorageConfig {
    pub capacity: u64,
    pub weights: EvictionWeights,
    #[serde(with = "secs")]
    pub gc_period: Duration,
    #[serde(with = "secs")]
    pub frequency_half_life: Duration,
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl Default for StorageConfig {
    fn default() -> Self {
        Self {
            capacity: 1 << 30,
            weights: EvictionWeights::default(),
            gc_period: Duration::from_secs(60),
            frequency_half_life: Duration::from_secs(3600),
        }
    }
}

impl StorageConfig {
    pub fn with_capacity(capacity: u64) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.capacity == 0 {
            return Err("cache capacity must be positive".into());
        }
        let w = self.weights;
        if [w.count, w.frequency, w.recency]
            .iter()
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            return Err("eviction weights must be finite and non-negative".into());
        }
        if self.frequency_half_life.is_zero() {
            return Err("frequency half-life must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryState {
    Absent,
    Transferring,
    Present,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub size: u64,
    pub state: EntryState,
    pub usage_count: u64,
    /// Exponentially decayed access rate, accesses per hour, as of
    /// `frequency_at`.
    pub usage_frequency: f64,
    pub frequency_at: DateTime<Utc>,
    pub last_access: DateTime<Utc>,
    pub lock_count: u32,
}

impl CacheEntry {
    fn decay_rate(half_life: Duration) -> f64 {
        std::f64::consts::LN_2 / (half_life.as_secs_f64() / 3600.0)
    }

    /// Access rate decayed to `now`.
    pub fn frequency_at(&self, now: DateTime<Utc>, half_life: Duration) -> f64 {
        let dt_h = ((now - self.frequency_at).num_milliseconds().max(0) as f64) / 3_600_000.0;
        self.usage_frequency * (-Self::decay_rate(half_life) * dt_h).exp()
    }

    fn record_access(&mut self, now: DateTime<Utc>, half_life: Duration) {
        self.usage_frequency = self.frequency_at(now, half_life) + Self::decay_rate(half_life);
        self.frequency_at = now;
        self.usage_count += 1;
        self.last_access = now;
    }

    pub fn age_seconds(&self, now: DateTime<Utc>) -> f64 {
        ((now - self.last_access).num_milliseconds().max(0) as f64) / 1000.0
    }

    fn meta(&self) -> CacheMeta {
        CacheMeta {
            key: self.key.clone(),
            size: self.size,
            usage_count: self.usage_count,
            last_access: self.last_access,
            usage_frequency: self.usage_frequency,
        }
    }
}

/// Ranks eviction candidates; lower scores are evicted first.
pub trait EvictionScorer: Send + Sync + std::fmt::Debug {
    fn score(&self, entry: &CacheEntry, now: DateTime<Utc>, half_life: Duration) -> f64;
}

/// `w_count·ln(1+count) + w_freq·frequency + w_recency/(1+age_seconds)`.
#[derive(Debug, Clone, Copy)]
pub struct WeightedObjective(pub EvictionWeights);

impl EvictionScorer for WeightedObjective {
    fn score(&self, e: &CacheEntry, now: DateTime<Utc>, half_life: Duration) -> f64 {
        let w = self.0;
        w.count * (e.usage_count as f64).ln_1p()
            + w.frequency * e.frequency_at(now, half_life)
            + w.recency * (1.0 / (1.0 + e.age_seconds(now)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcReport {
    pub evicted: Vec<CacheKey>,
    pub bytes_freed: u64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub capacity: u64,
    pub used: u64,
    pub transferring: u64,
    pub entries: usize,
    pub present: usize,
    pub locked_entries: usize,
    pub locked_bytes: u64,
    pub lock_total: u64,
}

#[derive(Debug, Default)]
struct Inner {
    entries: HashMap<CacheKey, CacheEntry>,
    capacity: u64,
    used: u64,
    reserved: u64,
}

impl Inner {
    fn free(&self) -> i128 {
        self.capacity as i128 - self.used as i128 - self.reserved as i128
    }
}

pub struct Cache {
    inner: Mutex<Inner>,
    transfer_done: Condvar,
    blobs: Arc<dyn BlobStore>,
    providers: Arc<ProviderRegistry>,
    scorer: RwLock<Arc<dyn EvictionScorer>>,
    half_life: Duration,
    clock: SharedClock,
    warnings: Mutex<Vec<String>>,
}

impl std::fmt::Debug for Cache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cache").field("stats", &self.stats()).finish()
    }
}

impl Cache {
    /// Builds the cache and re-indexes whatever `blobs` already holds.
    pub fn new(
        config: StorageConfig,
        blobs: Arc<dyn BlobStore>,
        providers: Arc<ProviderRegistry>,
        clock: SharedClock,
    ) -> Result<Self, DmsError> {
        config.validate().map_err(DmsError::ConfigInvalid)?;
        let mut inner = Inner {
            capacity: config.capacity,
            ..Inner::default()
        };
        for meta in blobs.scan().map_err(|e| DmsError::Io(e.to_string()))? {
            inner.used += meta.size;
            inner.entries.insert(
                meta.key.clone(),
                CacheEntry {
                    key: meta.key,
                    size: meta.size,
                    state: EntryState::Present,
                    usage_count: meta.usage_count,
                    usage_frequency: meta.usage_frequency,
                    frequency_at: meta.last_access,
                    last_access: meta.last_access,
                    lock_count: 0,
                },
            );
        }
        Ok(Self {
            inner: Mutex::new(inner),
            transfer_done: Condvar::new(),
            blobs,
            providers,
            scorer: RwLock::new(Arc::new(WeightedObjective(config.weights))),
            half_life: config.frequency_half_life,
            clock,
            warnings: Mutex::new(Vec::new()),
        })
    }

    pub fn set_scorer(&self, scorer: Arc<dyn EvictionScorer>) {
        *self.scorer.write() = scorer;
    }

    pub fn set_capacity(&self, capacity: u64) -> Result<(), DmsError> {
        if capacity == 0 {
            return Err(DmsError::ConfigInvalid("cache capacity must be positive".into()));
        }
        self.inner.lock().capacity = capacity;
        Ok(())
    }

    pub fn capacity(&self) -> u64 {
        self.inner.lock().capacity
    }

    /// Makes `entry` Present (transferring it if needed) and takes one lock
    /// on it. Concurrent callers for the same key share one transfer.
    pub fn acquire(&self, entry: &FileEntry) -> Result<CacheKey, DmsError> {
        let key = CacheKey::of(entry);
        let mut inner = self.inner.lock();
        loop {
            let state = inner.entries.get(&key).map(|e| e.state);
            match state {
                Some(EntryState::Present) => {
                    let now = self.clock.now();
                    let e = inner.entries.get_mut(&key).expect("present");
                    e.lock_count += 1;
                    e.record_access(now, self.half_life);
                    let meta = e.meta();
                    if let Err(err) = self.blobs.update_meta(&meta) {
                        log::warn!("could not update cache metadata for {key}: {err}");
                    }
                    return Ok(key);
                }
                Some(EntryState::Transferring) => {
                    self.transfer_done.wait(&mut inner);
                }
                Some(EntryState::Absent) | None => {
                    return self.transfer(inner, key, entry);
                }
            }
        }
    }

    fn transfer(
        &self,
        mut inner: parking_lot::MutexGuard<'_, Inner>,
        key: CacheKey,
        entry: &FileEntry,
    ) -> Result<CacheKey, DmsError> {
        let size = entry.size;
        if size > inner.capacity {
            return Err(DmsError::EvictionImpossible {
                needed: size,
                available: inner.capacity,
            });
        }
        self.make_room(&mut inner, size)?;
        let now = self.clock.now();
        let slot = inner.entries.entry(key.clone()).or_insert_with(|| CacheEntry {
            key: key.clone(),
            size,
            state: EntryState::Absent,
            usage_count: 0,
            usage_frequency: 0.0,
            frequency_at: now,
            last_access: now,
            lock_count: 0,
        });
        slot.state = EntryState::Transferring;
        slot.size = size;
        inner.reserved += size;
        drop(inner);

        let fetched = self.providers.fetch(entry, None).map_err(DmsError::from);
        let result = fetched.and_then(|bytes| {
            let meta = CacheMeta {
                key: key.clone(),
                size,
                usage_count: 0,
                last_access: now,
                usage_frequency: 0.0,
            };
            self.blobs.write(&meta, &bytes).map_err(|e| DmsError::Io(e.to_string()))
        });

        let mut inner = self.inner.lock();
        inner.reserved -= size;
        let outcome = match result {
            Ok(()) => {
                inner.used += size;
                let now = self.clock.now();
                let e = inner.entries.get_mut(&key).expect("reserved entry");
                e.state = EntryState::Present;
                e.lock_count += 1;
                e.record_access(now, self.half_life);
                let meta = e.meta();
                if let Err(err) = self.blobs.update_meta(&meta) {
                    log::warn!("could not update cache metadata for {key}: {err}");
                }
                Ok(key)
            }
            Err(err) => {
                if let Some(e) = inner.entries.get_mut(&key) {
                    e.state = EntryState::Absent;
                }
                Err(err)
            }
        };
        self.transfer_done.notify_all();
        outcome
    }

    pub fn release(&self, key: &CacheKey) {
        let mut inner = self.inner.lock();
        if let Some(e) = inner.entries.get_mut(key) {
            debug_assert!(e.lock_count > 0, "release without acquire for {key}");
            e.lock_count = e.lock_count.saturating_sub(1);
        }
    }

    pub fn read(&self, key: &CacheKey, offset: u64, len: u64) -> Result<Vec<u8>, DmsError> {
        let size = {
            let inner = self.inner.lock();
            match inner.entries.get(key) {
                Some(e) if e.state == EntryState::Present => e.size,
                _ => return Err(DmsError::Io(format!("{key} is not cached"))),
            }
        };
        if offset >= size {
            return Ok(Vec::new());
        }
        let len = len.min(size - offset);
        self.blobs
            .read(key, offset, len)
            .map_err(|e| DmsError::Io(e.to_string()))
    }

    /// Candidates in eviction order: unlocked Present entries by ascending
    /// score, ties broken by older access and then by key.
    fn ranked_candidates(&self, inner: &Inner) -> Vec<(CacheKey, u64)> {
        let now = self.clock.now();
        let scorer = self.scorer.read().clone();
        let mut scored: Vec<(f64, &CacheEntry)> = inner
            .entries
            .values()
            .filter(|e| e.state == EntryState::Present && e.lock_count == 0)
            .map(|e| (scorer.score(e, now, self.half_life), e))
            .collect();
        scored.sort_by(|(sa, a), (sb, b)| {
            sa.partial_cmp(sb)
                .unwrap_or(Ordering::Equal)
                .then(a.last_access.cmp(&b.last_access))
                .then_with(|| a.key.cmp(&b.key))
        });
        scored.into_iter().map(|(_, e)| (e.key.clone(), e.size)).collect()
    }

    /// Evicts until free space is at least `needed`. All or nothing: if the
    /// unlocked entries cannot cover the shortfall nothing is evicted.
    fn make_room(&self, inner: &mut Inner, needed: u64) -> Result<Vec<CacheKey>, DmsError> {
        let shortfall = needed as i128 - inner.free();
        if shortfall <= 0 {
            return Ok(Vec::new());
        }
        let candidates = self.ranked_candidates(inner);
        let evictable: u64 = candidates.iter().map(|(_, s)| s).sum();
        if (evictable as i128) < shortfall {
            return Err(DmsError::EvictionImpossible {
                needed,
                available: (inner.free().max(0) as u64).saturating_add(evictable),
            });
        }
        let mut evicted = Vec::new();
        for (key, size) in candidates {
            if inner.free() >= needed as i128 {
                break;
            }
            if let Err(e) = self.blobs.remove(&key) {
                log::warn!("failed to remove cached bytes for {key}: {e}");
            }
            let e = inner.entries.get_mut(&key).expect("candidate exists");
            e.state = EntryState::Absent;
            inner.used -= size;
            evicted.push(key);
        }
        Ok(evicted)
    }

    pub fn evict(&self, needed: u64) -> Result<Vec<CacheKey>, DmsError> {
        let mut inner = self.inner.lock();
        self.make_room(&mut inner, needed)
    }

    /// Restores the capacity bound if it is exceeded. Never fails; when the
    /// excess is locked a warning is recorded instead.
    pub fn gc_sweep(&self) -> GcReport {
        let mut inner = self.inner.lock();
        let before = inner.used;
        match self.make_room(&mut inner, 0) {
            Ok(evicted) => GcReport {
                bytes_freed: before - inner.used,
                evicted,
                warning: None,
            },
            Err(err) => {
                let msg = format!("gc could not restore capacity {}: {err}", inner.capacity);
                log::warn!("{msg}");
                self.warnings.lock().push(msg.clone());
                GcReport {
                    evicted: Vec::new(),
                    bytes_freed: 0,
                    warning: Some(msg),
                }
            }
        }
    }

    pub fn entry(&self, key: &CacheKey) -> Option<CacheEntry> {
        self.inner.lock().entries.get(key).cloned()
    }

    pub fn entries(&self) -> Vec<CacheEntry> {
        let mut all: Vec<_> = self.inner.lock().entries.values().cloned().collect();
        all.sort_by(|a, b| a.key.cmp(&b.key));
        all
    }

    pub fn lock_total(&self) -> u64 {
        self.inner.lock().entries.values().map(|e| e.lock_count as u64).sum()
    }

    pub fn warnings(&self) -> Vec<String> {
        self.warnings.lock().clone()
    }

    pub fn stats(&self) -> CacheStats {
        let inner = self.inner.lock();
        let locked: Vec<&CacheEntry> = inner.entries.values().filter(|e| e.lock_count > 0).collect();
        CacheStats {
            capacity: inner.capacity,
            used: inner.used,
            transferring: inner.reserved,
            entries: inner.entries.len(),
            present: inner
                .entries
                .values()
                .filter(|e| e.state == EntryState::Present)
                .count(),
            locked_entries: locked.len(),
            locked_bytes: locked.iter().map(|e| e.size).sum(),
            lock_total: locked.iter().map(|e| e.lock_count as u64).sum(),
        }
    }
}

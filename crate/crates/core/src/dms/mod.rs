// SPDX-License-Identifier: Apache-2.0

//! Data management: sessions, lazy materialization, cache and locking.
//!
//! Creating a session snapshots catalog names and shapes and moves no
//! bytes. The first `open` of a file pulls it from its provider into the
//! [`Cache`]; every open handle holds one lock on its cache entry so the
//! garbage collector cannot reclaim files in active use.

mod blob;
mod cache;
mod session;
mod vfs;

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, CatalogError, NodeId};
use crate::clock::SharedClock;
use crate::error::ErrorCode;
use crate::repository::{FileEntry, ProviderError, ProviderRegistry};
use crate::store::{Store, StoreError};

pub use blob::{BlobStore, CacheKey, CacheMeta, DirBlobStore, MemBlobStore};
pub use cache::{
    Cache, CacheEntry, CacheStats, EntryState, EvictionScorer, EvictionWeights, GcReport, StorageConfig,
    WeightedObjective,
};
pub use session::{DirEntry, FileAttr, FileKind, Session, SessionId};
pub use vfs::{SessionFs, VirtualFs};

const SESSIONS: &str = "dms.sessions";

#[derive(Debug, thiserror::Error)]
pub enum DmsError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("no such path {0:?}")]
    NoSuchPath(String),
    #[error("{0:?} is a directory")]
    IsADirectory(String),
    #[error("{0:?} is not a directory")]
    NotADirectory(String),
    #[error("file handle {0} is closed")]
    StaleHandle(u64),
    #[error("session {0} is suspended")]
    SessionSuspended(SessionId),
    #[error(transparent)]
    Transfer(#[from] ProviderError),
    #[error("cannot free {needed} bytes; at most {available} can be made available")]
    EvictionImpossible { needed: u64, available: u64 },
    #[error("cache i/o: {0}")]
    Io(String),
    #[error("invalid storage configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ErrorCode for DmsError {
    fn code(&self) -> &'static str {
        match self {
            DmsError::Catalog(e) => e.code(),
            DmsError::UnknownSession(_) => "UnknownSession",
            DmsError::NoSuchPath(_) => "NoSuchPath",
            DmsError::IsADirectory(_) => "IsADirectory",
            DmsError::NotADirectory(_) => "NotADirectory",
            DmsError::StaleHandle(_) => "StaleHandle",
            DmsError::SessionSuspended(_) => "SessionSuspended",
            DmsError::Transfer(e) => e.code(),
            DmsError::EvictionImpossible { .. } => "EvictionImpossible",
            DmsError::Io(_) => "IoError",
            DmsError::ConfigInvalid(_) => "ConfigInvalid",
            DmsError::Store(_) => "StorageError",
        }
    }
}

pub type Result<T, E = DmsError> = std::result::Result<T, E>;

/// Read-only handle on a session file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHandle {
    pub id: u64,
    pub session: SessionId,
    pub path: String,
    pub key: CacheKey,
}

#[derive(Debug)]
struct OpenFile {
    session: SessionId,
    entry: FileEntry,
    key: CacheKey,
    // false while the owning session is suspended; the lock is re-taken on
    // the next read after resume
    attached: bool,
}

pub struct Dms {
    catalog: Arc<Catalog>,
    cache: Arc<Cache>,
    sessions: RwLock<HashMap<SessionId, Session>>,
    handles: Mutex<HashMap<u64, OpenFile>>,
    next_handle: AtomicU64,
    store: Arc<Store>,
    clock: SharedClock,
}

impl std::fmt::Debug for Dms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dms")
            .field("sessions", &self.sessions.read().len())
            .field("handles", &self.handles.lock().len())
            .field("cache", &self.cache)
            .finish()
    }
}

impl Dms {
    pub fn with_store(
        catalog: Arc<Catalog>,
        providers: Arc<ProviderRegistry>,
        blobs: Arc<dyn BlobStore>,
        config: StorageConfig,
        store: Arc<Store>,
        clock: SharedClock,
    ) -> Result<Self> {
        let cache = Arc::new(Cache::new(config, blobs, providers, clock.clone())?);
        let mut sessions = HashMap::new();
        for (_, s) in store.scan::<Session>(SESSIONS)? {
            sessions.insert(s.id.clone(), s);
        }
        Ok(Self {
            catalog,
            cache,
            sessions: RwLock::new(sessions),
            handles: Mutex::new(HashMap::new()),
            next_handle: AtomicU64::new(1),
            store,
            clock,
        })
    }

    /// Volatile DMS with an in-memory blob store.
    pub fn in_memory(
        catalog: Arc<Catalog>,
        providers: Arc<ProviderRegistry>,
        config: StorageConfig,
        clock: SharedClock,
    ) -> Result<Self> {
        Self::with_store(
            catalog,
            providers,
            Arc::new(MemBlobStore::new()),
            config,
            Arc::new(Store::in_memory()),
            clock,
        )
    }

    pub fn cache(&self) -> &Arc<Cache> {
        &self.cache
    }

    pub fn create_session(&self, roots: &[NodeId], owner: Option<String>) -> Result<Session> {
        let session = Session::snapshot(&self.catalog, roots, owner, self.clock.now())?;
        self.store.put(SESSIONS, session.id.as_str(), &session)?;
        self.sessions.write().insert(session.id.clone(), session.clone());
        Ok(session)
    }

    pub fn session(&self, id: &SessionId) -> Result<Session> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| DmsError::UnknownSession(id.clone()))
    }

    pub fn sessions(&self) -> Vec<Session> {
        let mut all: Vec<_> = self.sessions.read().values().cloned().collect();
        all.sort_by(|a, b| a.created.cmp(&b.created).then_with(|| a.id.cmp(&b.id)));
        all
    }

    /// Closes every handle of the session and forgets it.
    pub fn delete_session(&self, id: &SessionId) -> Result<()> {
        if self.sessions.write().remove(id).is_none() {
            return Err(DmsError::UnknownSession(id.clone()));
        }
        self.store.delete(SESSIONS, id.as_str())?;
        self.drop_handles(id, true);
        Ok(())
    }

    fn drop_handles(&self, session: &SessionId, remove: bool) {
        let mut handles = self.handles.lock();
        let mine: Vec<u64> = handles
            .iter()
            .filter(|(_, h)| &h.session == session)
            .map(|(id, _)| *id)
            .collect();
        for id in mine {
            let h = handles.get_mut(&id).expect("listed");
            if h.attached {
                self.cache.release(&h.key);
                h.attached = false;
            }
            if remove {
                handles.remove(&id);
            }
        }
    }

    fn set_suspended(&self, id: &SessionId, suspended: bool) -> Result<()> {
        let mut sessions = self.sessions.write();
        let s = sessions
            .get_mut(id)
            .ok_or_else(|| DmsError::UnknownSession(id.clone()))?;
        s.suspended = suspended;
        self.store.put(SESSIONS, id.as_str(), s)?;
        Ok(())
    }

    /// Releases every cache lock held through the session. Handles stay
    /// valid and re-lock lazily after [`Dms::resume_session`].
    pub fn suspend_session(&self, id: &SessionId) -> Result<()> {
        self.set_suspended(id, true)?;
        self.drop_handles(id, false);
        Ok(())
    }

    pub fn resume_session(&self, id: &SessionId) -> Result<()> {
        self.set_suspended(id, false)
    }

    fn live_session(&self, id: &SessionId) -> Result<Session> {
        let s = self.session(id)?;
        if s.suspended {
            return Err(DmsError::SessionSuspended(id.clone()));
        }
        Ok(s)
    }

    pub fn stat(&self, session: &SessionId, path: &str) -> Result<FileAttr> {
        self.sessions
            .read()
            .get(session)
            .ok_or_else(|| DmsError::UnknownSession(session.clone()))?
            .stat(path)
    }

    pub fn list(&self, session: &SessionId, path: &str) -> Result<Vec<DirEntry>> {
        self.sessions
            .read()
            .get(session)
            .ok_or_else(|| DmsError::UnknownSession(session.clone()))?
            .list(path)
    }

    /// Opens a session file, blocking until its bytes are cached.
    pub fn open(&self, session: &SessionId, path: &str) -> Result<FileHandle> {
        let s = self.live_session(session)?;
        let Some(fref) = s.file(path) else {
            return Err(match s.stat(path) {
                Ok(_) => DmsError::IsADirectory(path.to_string()),
                Err(e) => e,
            });
        };
        let entry = FileEntry::from_provenance(&fref.provenance, fref.size);
        let key = self.cache.acquire(&entry)?;
        let id = self.next_handle.fetch_add(1, Ordering::SeqCst);
        let mut handles = self.handles.lock();
        // the session may have been deleted or suspended while we waited
        if let Err(e) = self.live_session(session) {
            drop(handles);
            self.cache.release(&key);
            return Err(e);
        }
        handles.insert(
            id,
            OpenFile {
                session: session.clone(),
                entry,
                key: key.clone(),
                attached: true,
            },
        );
        Ok(FileHandle {
            id,
            session: session.clone(),
            path: path.to_string(),
            key,
        })
    }

    pub fn read(&self, handle: &FileHandle, offset: u64, len: u64) -> Result<Vec<u8>> {
        let (key, reattach) = {
            let handles = self.handles.lock();
            let h = handles.get(&handle.id).ok_or(DmsError::StaleHandle(handle.id))?;
            (
                h.key.clone(),
                (!h.attached).then(|| (h.session.clone(), h.entry.clone())),
            )
        };
        if let Some((session, entry)) = reattach {
            self.live_session(&session)?;
            self.cache.acquire(&entry)?;
            let mut handles = self.handles.lock();
            match handles.get_mut(&handle.id) {
                Some(h) if !h.attached => h.attached = true,
                _ => {
                    // closed or re-attached concurrently
                    self.cache.release(&key);
                    if !handles.contains_key(&handle.id) {
                        return Err(DmsError::StaleHandle(handle.id));
                    }
                }
            }
        }
        self.cache.read(&key, offset, len)
    }

    pub fn close(&self, handle: &FileHandle) -> Result<()> {
        let h = self
            .handles
            .lock()
            .remove(&handle.id)
            .ok_or(DmsError::StaleHandle(handle.id))?;
        if h.attached {
            self.cache.release(&h.key);
        }
        Ok(())
    }

    /// Handles of `session` currently holding a cache lock.
    pub fn session_lock_count(&self, session: &SessionId) -> usize {
        self.handles
            .lock()
            .values()
            .filter(|h| &h.session == session && h.attached)
            .count()
    }

    pub fn open_handle_count(&self) -> usize {
        self.handles.lock().len()
    }

    pub fn evict(&self, needed: u64) -> Result<Vec<CacheKey>> {
        self.cache.evict(needed)
    }

    pub fn gc_sweep(&self) -> GcReport {
        self.cache.gc_sweep()
    }

    /// Catalog nodes some session still refers to.
    pub fn referenced_nodes(&self) -> HashSet<NodeId> {
        let sessions = self.sessions.read();
        sessions
            .values()
            .flat_map(|s| {
                s.roots
                    .iter()
                    .cloned()
                    .chain(s.mount_table.values().map(|f| f.item.clone()))
            })
            .collect()
    }

    /// Runs [`Dms::gc_sweep`] every `period` until the returned task is
    /// dropped.
    pub fn spawn_gc(self: &Arc<Self>, period: Duration) -> GcTask {
        let (stop, stopped) = crossbeam_channel::bounded::<()>(1);
        let dms = Arc::downgrade(self);
        let thread = std::thread::Builder::new()
            .name("dms-gc".into())
            .spawn(move || {
                while let Err(crossbeam_channel::RecvTimeoutError::Timeout) = stopped.recv_timeout(period) {
                    let Some(dms) = dms.upgrade() else { break };
                    let report = dms.gc_sweep();
                    if !report.evicted.is_empty() {
                        log::info!(
                            "gc evicted {} entries, {} bytes",
                            report.evicted.len(),
                            report.bytes_freed
                        );
                    }
                }
            })
            .expect("spawn gc thread");
        GcTask {
            stop,
            thread: Some(thread),
        }
    }
}

pub struct GcTask {
    stop: crossbeam_channel::Sender<()>,
    thread: Option<JoinHandle<()>>,
}

impl Drop for GcTask {
    fn drop(&mut self) {
        let _ = self.stop.try_send(());
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests;

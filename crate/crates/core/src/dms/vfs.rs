// SPDX-License-Identifier: Apache-2.0

//! Filesystem front over a session.
//!
//! [`SessionFs`] is what a container runtime mounts. [`VirtualFs`] is the
//! in-process implementation; an OS-level user-space mount would implement
//! the same trait.

use std::sync::Arc;

use super::{DirEntry, Dms, DmsError, FileAttr, FileHandle, SessionId};

pub trait SessionFs: Send + Sync + std::fmt::Debug {
    fn session_id(&self) -> &SessionId;
    fn stat(&self, path: &str) -> Result<FileAttr, DmsError>;
    fn list(&self, path: &str) -> Result<Vec<DirEntry>, DmsError>;
    fn open(&self, path: &str) -> Result<FileHandle, DmsError>;
    fn read(&self, handle: &FileHandle, offset: u64, len: u64) -> Result<Vec<u8>, DmsError>;
    fn close(&self, handle: &FileHandle) -> Result<(), DmsError>;

    fn read_to_end(&self, path: &str) -> Result<Vec<u8>, DmsError> {
        let h = self.open(path)?;
        let size = self.stat(path)?.size;
        let out = self.read(&h, 0, size);
        self.close(&h)?;
        out
    }
}

#[derive(Debug, Clone)]
pub struct VirtualFs {
    dms: Arc<Dms>,
    session: SessionId,
}

impl VirtualFs {
    pub fn new(dms: Arc<Dms>, session: SessionId) -> Self {
        Self { dms, session }
    }
}

impl SessionFs for VirtualFs {
    fn session_id(&self) -> &SessionId {
        &self.session
    }

    fn stat(&self, path: &str) -> Result<FileAttr, DmsError> {
        self.dms.stat(&self.session, path)
    }

    fn list(&self, path: &str) -> Result<Vec<DirEntry>, DmsError> {
        self.dms.list(&self.session, path)
    }

    fn open(&self, path: &str) -> Result<FileHandle, DmsError> {
        self.dms.open(&self.session, path)
    }

    fn read(&self, handle: &FileHandle, offset: u64, len: u64) -> Result<Vec<u8>, DmsError> {
        self.dms.read(handle, offset, len)
    }

    fn close(&self, handle: &FileHandle) -> Result<(), DmsError> {
        self.dms.close(handle)
    }
}

// SPDX-License-Identifier: Apache-2.0

//! `file:` provider over a local directory or single file.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::ops::Range;
use std::path::{Path, PathBuf};

use super::{DatasetDescriptor, FileEntry, Provider, ProviderError, Result};
use crate::catalog::Protocol;

#[derive(Debug, Clone)]
pub struct LocalProvider {
    name: String,
}

impl Default for LocalProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl LocalProvider {
    pub fn new() -> Self {
        Self {
            name: "local".to_string(),
        }
    }

    fn path_of(identifier: &str) -> Option<PathBuf> {
        let rest = identifier.strip_prefix("file:")?;
        let rest = rest.strip_prefix("//").unwrap_or(rest);
        Some(PathBuf::from(rest))
    }

    fn entry(&self, identifier: &str, root: &Path, path: &Path, size: u64) -> FileEntry {
        let rel = path
            .strip_prefix(root)
            .ok()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| Path::new(path.file_name().unwrap_or_default()));
        FileEntry {
            original_name: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            relative_path: rel.to_string_lossy().into_owned(),
            size,
            source_url: url::Url::from_file_path(path)
                .map(String::from)
                .unwrap_or_else(|_| format!("file://{}", path.display())),
            protocol: Protocol::Local,
            provider: self.name.clone(),
            identifier: identifier.to_string(),
            checksum: None,
        }
    }
}

impl Provider for LocalProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn schemes(&self) -> Vec<String> {
        vec!["file:".to_string()]
    }

    fn protocols(&self) -> Vec<Protocol> {
        vec![Protocol::Local]
    }

    fn describe(&self, identifier: &str) -> Result<Option<DatasetDescriptor>> {
        let Some(root) = Self::path_of(identifier) else {
            return Ok(None);
        };
        let Ok(meta) = std::fs::metadata(&root) else {
            return Ok(None);
        };
        let name = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "root".to_string());
        let mut entries = Vec::new();
        if meta.is_file() {
            entries.push(self.entry(identifier, &root, &root, meta.len()));
        } else {
            for dent in walkdir::WalkDir::new(&root).sort_by_file_name() {
                let dent = dent.map_err(|e| ProviderError::TransferFailed(e.to_string()))?;
                if dent.file_type().is_file() {
                    let len = dent
                        .metadata()
                        .map_err(|e| ProviderError::TransferFailed(e.to_string()))?
                        .len();
                    entries.push(self.entry(identifier, &root, dent.path(), len));
                }
            }
        }
        Ok(Some(DatasetDescriptor {
            identifier: identifier.to_string(),
            name,
            provider: self.name.clone(),
            total_size: entries.iter().map(|e| e.size).sum(),
            entries,
            sub_datasets: Vec::new(),
        }))
    }

    fn read(&self, entry: &FileEntry, range: Range<u64>) -> Result<Vec<u8>> {
        let path = url::Url::parse(&entry.source_url)
            .ok()
            .and_then(|u| u.to_file_path().ok())
            .ok_or_else(|| ProviderError::SourceNotFound(entry.source_url.clone()))?;
        let mut file = File::open(&path).map_err(|_| ProviderError::SourceNotFound(entry.source_url.clone()))?;
        file.seek(SeekFrom::Start(range.start))
            .map_err(|e| ProviderError::TransferFailed(e.to_string()))?;
        let mut buf = Vec::with_capacity((range.end - range.start) as usize);
        file.take(range.end - range.start)
            .read_to_end(&mut buf)
            .map_err(|e| ProviderError::TransferFailed(e.to_string()))?;
        Ok(buf)
    }
}

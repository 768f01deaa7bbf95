// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, FileRef, NodeId, NodeKind};

use super::DmsError;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(String);

impl SessionId {
    pub fn generate() -> Self {
        Self(uuid::Uuid::new_v4().simple().to_string())
    }

    pub fn new(s: &str) -> Self {
        Self(s.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for SessionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    File,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileAttr {
    pub path: String,
    pub kind: FileKind,
    pub size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirEntry {
    pub name: String,
    pub kind: FileKind,
    pub size: u64,
}

/// A user-composed view over catalog data, frozen when created.
///
/// Each root appears as a top-level entry named after the node. Folders
/// become directories. An Item with a single file becomes a file at the
/// item's path; an Item with several files becomes a directory holding
/// them under their original names. Items without files are omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: SessionId,
    pub roots: Vec<NodeId>,
    pub mount_table: BTreeMap<String, FileRef>,
    pub directories: BTreeSet<String>,
    pub created: DateTime<Utc>,
    #[serde(default)]
    pub owner: Option<String>,
    #[serde(default)]
    pub suspended: bool,
}

fn unique(taken: &BTreeSet<String>, mount_table: &BTreeMap<String, FileRef>, base: &str) -> String {
    if !taken.contains(base) && !mount_table.contains_key(base) {
        return base.to_string();
    }
    (1u64..)
        .map(|n| format!("{base} ({n})"))
        .find(|p| !taken.contains(p) && !mount_table.contains_key(p))
        .expect("unbounded counter")
}

impl Session {
    pub fn snapshot(
        catalog: &Catalog,
        roots: &[NodeId],
        owner: Option<String>,
        now: DateTime<Utc>,
    ) -> Result<Self, DmsError> {
        let mut directories = BTreeSet::new();
        directories.insert("/".to_string());
        let mut mount_table = BTreeMap::new();
        for root in roots {
            let walk = catalog.walk(root)?;
            let root_name = &walk[0].node.name;
            let base = unique(&directories, &mount_table, &format!("/{root_name}"));
            for entry in walk {
                let path = if entry.path.is_empty() {
                    base.clone()
                } else {
                    format!("{base}/{}", entry.path.join("/"))
                };
                match entry.node.kind {
                    NodeKind::Collection | NodeKind::Folder => {
                        directories.insert(path);
                    }
                    NodeKind::Item => {
                        let files = catalog.files(&entry.node.id)?;
                        match files.len() {
                            0 => {}
                            1 => {
                                mount_table.insert(path, files.into_iter().next().expect("one file"));
                            }
                            _ => {
                                directories.insert(path.clone());
                                for f in files {
                                    let p = unique(
                                        &directories,
                                        &mount_table,
                                        &format!("{path}/{}", f.provenance.original_name),
                                    );
                                    mount_table.insert(p, f);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            id: SessionId::generate(),
            roots: roots.to_vec(),
            mount_table,
            directories,
            created: now,
            owner,
            suspended: false,
        })
    }

    fn normalize(path: &str) -> String {
        let parts: Vec<&str> = path.split('/').filter(|p| !p.is_empty() && *p != ".").collect();
        format!("/{}", parts.join("/"))
    }

    pub fn file(&self, path: &str) -> Option<&FileRef> {
        self.mount_table.get(&Self::normalize(path))
    }

    pub fn stat(&self, path: &str) -> Result<FileAttr, DmsError> {
        let path = Self::normalize(path);
        if let Some(f) = self.mount_table.get(&path) {
            return Ok(FileAttr {
                path,
                kind: FileKind::File,
                size: f.size,
                checksum: f.provenance.checksum.clone(),
            });
        }
        if self.directories.contains(&path) {
            let size = self.files_under(&path).map(|(_, f)| f.size).sum();
            return Ok(FileAttr {
                path,
                kind: FileKind::Directory,
                size,
                checksum: None,
            });
        }
        Err(DmsError::NoSuchPath(path))
    }

    fn files_under<'a>(&'a self, dir: &str) -> impl Iterator<Item = (&'a String, &'a FileRef)> + 'a {
        let prefix = if dir == "/" { "/".to_string() } else { format!("{dir}/") };
        self.mount_table
            .range(prefix.clone()..)
            .take_while(move |(p, _)| p.starts_with(&prefix))
    }

    pub fn list(&self, path: &str) -> Result<Vec<DirEntry>, DmsError> {
        let path = Self::normalize(path);
        if !self.directories.contains(&path) {
            return Err(if self.mount_table.contains_key(&path) {
                DmsError::NotADirectory(path)
            } else {
                DmsError::NoSuchPath(path)
            });
        }
        let prefix = if path == "/" {
            "/".to_string()
        } else {
            format!("{path}/")
        };
        let is_child = |p: &str| p.len() > prefix.len() && p.starts_with(&prefix) && !p[prefix.len()..].contains('/');
        let mut out: Vec<DirEntry> = self
            .directories
            .iter()
            .filter(|d| is_child(d))
            .map(|d| DirEntry {
                name: d[prefix.len()..].to_string(),
                kind: FileKind::Directory,
                size: self.files_under(d).map(|(_, f)| f.size).sum(),
            })
            .chain(
                self.mount_table
                    .iter()
                    .filter(|(p, _)| is_child(p))
                    .map(|(p, f)| DirEntry {
                        name: p[prefix.len()..].to_string(),
                        kind: FileKind::File,
                        size: f.size,
                    }),
            )
            .collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(out)
    }

    /// `(path, size, checksum)` for every file, sorted by path.
    pub fn file_list(&self) -> Vec<(String, u64, Option<String>)> {
        self.mount_table
            .iter()
            .map(|(p, f)| (p.clone(), f.size, f.provenance.checksum.clone()))
            .collect()
    }
}

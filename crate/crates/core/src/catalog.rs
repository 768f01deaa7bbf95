// SPDX-License-Identifier: Apache-2.0

//! Hierarchical by-reference metadata store.
//!
//! Collections hold Folders, Folders hold Folders and Items, Items carry
//! zero or more [`FileRef`]s. A `FileRef` points at bytes held by an
//! external provider; the catalog itself never moves data. Provenance is
//! written once when a file is registered and is never touched by move,
//! rename or annotate.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::error::ErrorCode;
use crate::store::{Store, StoreError};

const NODES: &str = "catalog.nodes";
const FILES: &str = "catalog.files";

pub const MAX_NAME_BYTES: usize = 255;
pub const MAX_ID_CHARS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn generate() -> Self {
        Self(uuid::Uuid::new_v4().simple().to_string())
    }

    pub fn parse(s: &str) -> Option<Self> {
        (!s.is_empty() && s.chars().count() <= MAX_ID_CHARS).then(|| Self(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Collection,
    Folder,
    Item,
}

impl NodeKind {
    pub fn is_container(self) -> bool {
        !matches!(self, NodeKind::Item)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub name: String,
    pub parent: Option<NodeId>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub created: DateTime<Utc>,
    pub modified: DateTime<Utc>,
    #[serde(default)]
    pub deleted: bool,
}

/// Transfer protocol of a referenced file.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Protocol {
    Http,
    Local,
    Mock,
    Other(String),
}

impl Protocol {
    pub fn as_str(&self) -> &str {
        match self {
            Protocol::Http => "http",
            Protocol::Local => "local",
            Protocol::Mock => "mock",
            Protocol::Other(s) => s,
        }
    }
}

impl From<&str> for Protocol {
    fn from(s: &str) -> Self {
        match s {
            "http" | "https" => Protocol::Http,
            "local" | "file" => Protocol::Local,
            "mock" => Protocol::Mock,
            other => Protocol::Other(other.to_string()),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Protocol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Protocol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Protocol::from(s.as_str()))
    }
}

/// Where a file's bytes come from. Immutable once registered.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub source_url: String,
    pub protocol: Protocol,
    pub provider: String,
    pub identifier: String,
    pub original_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub item: NodeId,
    pub provenance: ProvenanceRecord,
    pub size: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("unknown parent {0}")]
    UnknownParent(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("a sibling named {0:?} already exists")]
    DuplicateName(String),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("moving {node} under {new_parent} would create a cycle")]
    CycleDetected { node: NodeId, new_parent: NodeId },
    #[error("a {child:?} cannot be placed under a {parent:?}")]
    KindMismatch { child: NodeKind, parent: Option<NodeKind> },
    #[error("node {0} is not a collection or folder")]
    NotAContainer(NodeId),
    #[error("no such path {0:?}")]
    NoSuchPath(String),
    #[error("node {0} is still referenced and cannot be purged")]
    Referenced(NodeId),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ErrorCode for CatalogError {
    fn code(&self) -> &'static str {
        match self {
            CatalogError::UnknownParent(_) => "UnknownParent",
            CatalogError::UnknownNode(_) => "UnknownNode",
            CatalogError::DuplicateName(_) => "DuplicateName",
            CatalogError::InvalidName(_) => "InvalidName",
            CatalogError::CycleDetected { .. } => "CycleDetected",
            CatalogError::KindMismatch { .. } => "KindMismatch",
            CatalogError::NotAContainer(_) => "NotAContainer",
            CatalogError::NoSuchPath(_) => "NoSuchPath",
            CatalogError::Referenced(_) => "Referenced",
            CatalogError::Store(_) => "StorageError",
        }
    }
}

pub type Result<T, E = CatalogError> = std::result::Result<T, E>;

/// Names become path components in session filesystems.
pub fn validate_name(name: &str) -> Result<()> {
    let bad = name.is_empty()
        || name.len() > MAX_NAME_BYTES
        || name == "."
        || name == ".."
        || name.contains('/')
        || name.contains('\0');
    if bad {
        Err(CatalogError::InvalidName(name.to_string()))
    } else {
        Ok(())
    }
}

/// A node together with its path relative to the root of a walk.
#[derive(Clone, Debug)]
pub struct WalkEntry {
    pub path: Vec<String>,
    pub node: Node,
}

#[derive(Default)]
struct Inner {
    nodes: HashMap<NodeId, Node>,
    // live children of each container, by name
    children: HashMap<NodeId, BTreeMap<String, NodeId>>,
    collections: BTreeMap<String, NodeId>,
    files: HashMap<NodeId, Vec<FileRef>>,
}

impl Inner {
    fn live(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id).filter(|n| !n.deleted)
    }

    fn node(&self, id: &NodeId) -> Result<&Node> {
        self.live(id).ok_or_else(|| CatalogError::UnknownNode(id.clone()))
    }

    fn siblings(&self, parent: Option<&NodeId>) -> Option<&BTreeMap<String, NodeId>> {
        match parent {
            Some(p) => self.children.get(p),
            None => Some(&self.collections),
        }
    }

    fn name_taken(&self, parent: Option<&NodeId>, name: &str) -> bool {
        self.siblings(parent).is_some_and(|s| s.contains_key(name))
    }

    fn unlink(&mut self, node: &Node) {
        match &node.parent {
            Some(p) => {
                if let Some(s) = self.children.get_mut(p) {
                    s.remove(&node.name);
                }
            }
            None => {
                self.collections.remove(&node.name);
            }
        }
    }

    fn link(&mut self, node: &Node) {
        match &node.parent {
            Some(p) => {
                self.children
                    .entry(p.clone())
                    .or_default()
                    .insert(node.name.clone(), node.id.clone());
            }
            None => {
                self.collections.insert(node.name.clone(), node.id.clone());
            }
        }
    }

    fn is_ancestor_or_self<'a>(&'a self, ancestor: &NodeId, mut of: &'a NodeId) -> bool {
        loop {
            if of == ancestor {
                return true;
            }
            match self.nodes.get(of).and_then(|n| n.parent.as_ref()) {
                Some(p) => of = p,
                None => return false,
            }
        }
    }

    fn descendants(&self, root: &NodeId) -> Vec<NodeId> {
        let mut out = vec![root.clone()];
        let mut i = 0;
        while i < out.len() {
            if let Some(kids) = self.children.get(&out[i]) {
                out.extend(kids.values().cloned());
            }
            i += 1;
        }
        out
    }
}

fn placement_ok(child: NodeKind, parent: Option<NodeKind>) -> bool {
    matches!(
        (child, parent),
        (NodeKind::Collection, None)
            | (NodeKind::Folder, Some(NodeKind::Collection | NodeKind::Folder))
            | (NodeKind::Item, Some(NodeKind::Folder))
    )
}

pub struct Catalog {
    inner: RwLock<Inner>,
    store: Arc<Store>,
    clock: SharedClock,
}

impl fmt::Debug for Catalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Catalog")
            .field("nodes", &self.inner.read().nodes.len())
            .finish()
    }
}

impl Catalog {
    /// Loads whatever the store already holds.
    pub fn open(store: Arc<Store>, clock: SharedClock) -> Result<Self> {
        let mut inner = Inner::default();
        for (_, node) in store.scan::<Node>(NODES)? {
            inner.nodes.insert(node.id.clone(), node);
        }
        let live: Vec<Node> = inner.nodes.values().filter(|n| !n.deleted).cloned().collect();
        for node in &live {
            inner.link(node);
        }
        for (key, refs) in store.scan::<Vec<FileRef>>(FILES)? {
            if let Some(id) = NodeId::parse(&key) {
                inner.files.insert(id, refs);
            }
        }
        Ok(Self {
            inner: RwLock::new(inner),
            store,
            clock,
        })
    }

    pub fn in_memory(clock: SharedClock) -> Self {
        Self::open(Arc::new(Store::in_memory()), clock).expect("empty store cannot fail")
    }

    fn persist(&self, node: &Node) -> Result<()> {
        self.store.put(NODES, node.id.as_str(), node)?;
        Ok(())
    }

    fn touch(&self, inner: &mut Inner, id: &NodeId) -> Result<()> {
        let now = self.clock.now();
        if let Some(n) = inner.nodes.get_mut(id) {
            n.modified = now;
            let n = n.clone();
            self.persist(&n)?;
        }
        Ok(())
    }

    fn insert(&self, parent: Option<&NodeId>, kind: NodeKind, name: &str) -> Result<Node> {
        validate_name(name)?;
        let mut inner = self.inner.write();
        let parent_kind = match parent {
            Some(p) => Some(
                inner
                    .live(p)
                    .ok_or_else(|| CatalogError::UnknownParent(p.clone()))?
                    .kind,
            ),
            None => None,
        };
        if let (Some(p), Some(NodeKind::Item)) = (parent, parent_kind) {
            return Err(CatalogError::NotAContainer(p.clone()));
        }
        if !placement_ok(kind, parent_kind) {
            return Err(CatalogError::KindMismatch {
                child: kind,
                parent: parent_kind,
            });
        }
        if inner.name_taken(parent, name) {
            return Err(CatalogError::DuplicateName(name.to_string()));
        }
        let now = self.clock.now();
        let node = Node {
            id: NodeId::generate(),
            kind,
            name: name.to_string(),
            parent: parent.cloned(),
            metadata: BTreeMap::new(),
            created: now,
            modified: now,
            deleted: false,
        };
        self.persist(&node)?;
        inner.nodes.insert(node.id.clone(), node.clone());
        inner.link(&node);
        if kind.is_container() {
            inner.children.entry(node.id.clone()).or_default();
        }
        if let Some(p) = parent {
            self.touch(&mut inner, p)?;
        }
        Ok(node)
    }

    pub fn create_collection(&self, name: &str) -> Result<Node> {
        self.insert(None, NodeKind::Collection, name)
    }

    pub fn create_folder(&self, parent: &NodeId, name: &str) -> Result<Node> {
        self.insert(Some(parent), NodeKind::Folder, name)
    }

    pub fn create_item(&self, parent: &NodeId, name: &str) -> Result<Node> {
        self.insert(Some(parent), NodeKind::Item, name)
    }

    /// First free name among `base`, `base (1)`, `base (2)`, ...
    pub fn unique_child_name(&self, parent: Option<&NodeId>, base: &str) -> String {
        let inner = self.inner.read();
        if !inner.name_taken(parent, base) {
            return base.to_string();
        }
        (1u64..)
            .map(|n| format!("{base} ({n})"))
            .find(|candidate| !inner.name_taken(parent, candidate))
            .expect("unbounded counter")
    }

    /// Creates a container child, suffixing the name on collision.
    pub fn create_unique(&self, parent: Option<&NodeId>, kind: NodeKind, base: &str) -> Result<Node> {
        loop {
            let name = self.unique_child_name(parent, base);
            match self.insert(parent, kind, &name) {
                Err(CatalogError::DuplicateName(_)) => continue,
                other => return other,
            }
        }
    }

    pub fn add_file(&self, item: &NodeId, provenance: ProvenanceRecord, size: u64) -> Result<FileRef> {
        let mut inner = self.inner.write();
        let node = inner.node(item)?;
        if node.kind != NodeKind::Item {
            return Err(CatalogError::KindMismatch {
                child: NodeKind::Item,
                parent: Some(node.kind),
            });
        }
        let fref = FileRef {
            item: item.clone(),
            provenance,
            size,
        };
        let refs = inner.files.entry(item.clone()).or_default();
        refs.push(fref.clone());
        let refs = refs.clone();
        self.store.put(FILES, item.as_str(), &refs)?;
        Ok(fref)
    }

    pub fn get(&self, id: &NodeId) -> Result<Node> {
        self.inner.read().node(id).cloned()
    }

    pub fn files(&self, item: &NodeId) -> Result<Vec<FileRef>> {
        let inner = self.inner.read();
        inner.node(item)?;
        Ok(inner.files.get(item).cloned().unwrap_or_default())
    }

    pub fn move_node(&self, id: &NodeId, new_parent: &NodeId) -> Result<Node> {
        let mut inner = self.inner.write();
        let node = inner.node(id)?.clone();
        let dest = inner
            .live(new_parent)
            .ok_or_else(|| CatalogError::UnknownParent(new_parent.clone()))?
            .clone();
        if node.parent.as_ref() == Some(new_parent) {
            return Ok(node);
        }
        if inner.is_ancestor_or_self(id, new_parent) {
            return Err(CatalogError::CycleDetected {
                node: id.clone(),
                new_parent: new_parent.clone(),
            });
        }
        if !placement_ok(node.kind, Some(dest.kind)) {
            return Err(CatalogError::KindMismatch {
                child: node.kind,
                parent: Some(dest.kind),
            });
        }
        if inner.name_taken(Some(new_parent), &node.name) {
            return Err(CatalogError::DuplicateName(node.name.clone()));
        }
        let old_parent = node.parent.clone();
        let mut moved = node.clone();
        moved.parent = Some(new_parent.clone());
        moved.modified = self.clock.now();
        self.persist(&moved)?;
        inner.unlink(&node);
        inner.link(&moved);
        inner.nodes.insert(id.clone(), moved.clone());
        if let Some(p) = old_parent {
            self.touch(&mut inner, &p)?;
        }
        self.touch(&mut inner, new_parent)?;
        Ok(moved)
    }

    pub fn rename_node(&self, id: &NodeId, new_name: &str) -> Result<Node> {
        validate_name(new_name)?;
        let mut inner = self.inner.write();
        let node = inner.node(id)?.clone();
        if node.name == new_name {
            return Ok(node);
        }
        if inner.name_taken(node.parent.as_ref(), new_name) {
            return Err(CatalogError::DuplicateName(new_name.to_string()));
        }
        let mut renamed = node.clone();
        renamed.name = new_name.to_string();
        renamed.modified = self.clock.now();
        self.persist(&renamed)?;
        inner.unlink(&node);
        inner.link(&renamed);
        inner.nodes.insert(id.clone(), renamed.clone());
        Ok(renamed)
    }

    /// Children of a container, sorted by name.
    pub fn list_children(&self, id: &NodeId) -> Result<Vec<Node>> {
        let inner = self.inner.read();
        let node = inner.node(id)?;
        if !node.kind.is_container() {
            return Err(CatalogError::NotAContainer(id.clone()));
        }
        Ok(inner
            .children
            .get(id)
            .map(|kids| kids.values().filter_map(|k| inner.live(k).cloned()).collect())
            .unwrap_or_default())
    }

    pub fn collections(&self) -> Vec<Node> {
        let inner = self.inner.read();
        inner
            .collections
            .values()
            .filter_map(|id| inner.live(id).cloned())
            .collect()
    }

    pub fn annotate(&self, id: &NodeId, key: &str, value: &str) -> Result<Node> {
        let mut inner = self.inner.write();
        let mut node = inner.node(id)?.clone();
        node.metadata.insert(key.to_string(), value.to_string());
        node.modified = self.clock.now();
        self.persist(&node)?;
        inner.nodes.insert(id.clone(), node.clone());
        Ok(node)
    }

    /// Absolute path such as `/collection/folder/item`.
    pub fn path_of(&self, id: &NodeId) -> Result<String> {
        let inner = self.inner.read();
        let mut parts = Vec::new();
        let mut cur = inner.node(id)?;
        loop {
            parts.push(cur.name.clone());
            match &cur.parent {
                Some(p) => cur = inner.node(p)?,
                None => break,
            }
        }
        parts.reverse();
        Ok(format!("/{}", parts.join("/")))
    }

    pub fn resolve_path(&self, path: &str) -> Result<Node> {
        let inner = self.inner.read();
        let mut parts = path.split('/').filter(|p| !p.is_empty());
        let no_such = || CatalogError::NoSuchPath(path.to_string());
        let first = parts.next().ok_or_else(no_such)?;
        let mut cur = inner.collections.get(first).ok_or_else(no_such)?;
        for part in parts {
            cur = inner
                .children
                .get(cur)
                .and_then(|kids| kids.get(part))
                .ok_or_else(no_such)?;
        }
        inner.live(cur).cloned().ok_or_else(no_such)
    }

    /// Pre-order walk of the live subtree under `root` (root included,
    /// with an empty relative path). Siblings are visited by name.
    pub fn walk(&self, root: &NodeId) -> Result<Vec<WalkEntry>> {
        let inner = self.inner.read();
        let node = inner.node(root)?.clone();
        let mut out = Vec::new();
        let mut stack = vec![WalkEntry { path: Vec::new(), node }];
        while let Some(entry) = stack.pop() {
            if let Some(kids) = inner.children.get(&entry.node.id) {
                for kid in kids.values().rev() {
                    if let Some(k) = inner.live(kid) {
                        let mut path = entry.path.clone();
                        path.push(k.name.clone());
                        stack.push(WalkEntry { path, node: k.clone() });
                    }
                }
            }
            out.push(entry);
        }
        Ok(out)
    }

    /// Tombstones `id` and its subtree. Ids are never reused; the names
    /// become free for new siblings.
    pub fn delete_node(&self, id: &NodeId) -> Result<Vec<NodeId>> {
        let mut inner = self.inner.write();
        let node = inner.node(id)?.clone();
        let doomed = inner.descendants(id);
        let now = self.clock.now();
        for d in &doomed {
            if let Some(n) = inner.nodes.get_mut(d) {
                n.deleted = true;
                n.modified = now;
                let n = n.clone();
                self.persist(&n)?;
            }
        }
        inner.unlink(&node);
        for d in &doomed {
            inner.children.remove(d);
        }
        if let Some(p) = &node.parent {
            self.touch(&mut inner, p)?;
        }
        Ok(doomed)
    }

    /// Hard-removes a tombstoned subtree unless `is_referenced` reports
    /// that some node in it is still in use.
    pub fn purge(&self, id: &NodeId, is_referenced: impl Fn(&NodeId) -> bool) -> Result<usize> {
        let mut inner = self.inner.write();
        let node = inner
            .nodes
            .get(id)
            .ok_or_else(|| CatalogError::UnknownNode(id.clone()))?;
        if !node.deleted {
            return Err(CatalogError::Referenced(id.clone()));
        }
        let doomed: Vec<NodeId> = inner
            .nodes
            .values()
            .filter(|n| n.deleted && inner.is_ancestor_or_self(id, &n.id))
            .map(|n| n.id.clone())
            .collect();
        if let Some(held) = doomed.iter().find(|d| is_referenced(d)) {
            return Err(CatalogError::Referenced(held.clone()));
        }
        for d in &doomed {
            inner.nodes.remove(d);
            inner.files.remove(d);
            self.store.delete(NODES, d.as_str())?;
            self.store.delete(FILES, d.as_str())?;
        }
        Ok(doomed.len())
    }

    /// Every provenance record in the catalog, sorted.
    pub fn provenance_multiset(&self) -> Vec<ProvenanceRecord> {
        let inner = self.inner.read();
        let mut all: Vec<ProvenanceRecord> = inner
            .files
            .iter()
            .filter(|(item, _)| inner.live(item).is_some())
            .flat_map(|(_, refs)| refs.iter().map(|r| r.provenance.clone()))
            .collect();
        all.sort();
        all
    }

    pub fn node_count(&self) -> usize {
        self.inner.read().nodes.values().filter(|n| !n.deleted).count()
    }

    /// Full traversal check of the forest shape: every live node is
    /// reachable from exactly one collection, placement rules hold and
    /// sibling names are unique.
    pub fn check_tree(&self) -> std::result::Result<(), String> {
        let inner = self.inner.read();
        let mut seen = std::collections::HashSet::new();
        for root in inner.collections.values() {
            let mut stack = vec![root.clone()];
            while let Some(id) = stack.pop() {
                if !seen.insert(id.clone()) {
                    return Err(format!("node {id} reached twice"));
                }
                let node = inner.live(&id).ok_or(format!("dangling child {id}"))?;
                let parent_kind = node.parent.as_ref().and_then(|p| inner.live(p)).map(|p| p.kind);
                if !placement_ok(node.kind, parent_kind) {
                    return Err(format!("bad placement of {id}"));
                }
                if let Some(kids) = inner.children.get(&id) {
                    for (name, kid) in kids {
                        let k = inner.live(kid).ok_or(format!("dangling {kid}"))?;
                        if &k.name != name || k.parent.as_ref() != Some(&id) {
                            return Err(format!("index mismatch for {kid}"));
                        }
                        stack.push(kid.clone());
                    }
                }
            }
        }
        let live = inner.nodes.values().filter(|n| !n.deleted).count();
        if live != seen.len() {
            return Err(format!("{} live nodes unreachable", live - seen.len()));
        }
        Ok(())
    }
}

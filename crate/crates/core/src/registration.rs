// SPDX-License-Identifier: Apache-2.0

//! Registers an external dataset into the catalog by reference.
//!
//! One Folder is created for the dataset, one Item (holding one FileRef)
//! for each of its files, with intermediate Folders for nested relative
//! paths. Every referenced sub-dataset becomes a sub-Folder and is
//! registered the same way. No file bytes are read.

use std::collections::HashMap;

use crate::catalog::{Catalog, CatalogError, NodeId, NodeKind};
use crate::error::ErrorCode;
use crate::repository::{DatasetTree, ProviderError, ProviderRegistry};

#[derive(Debug, thiserror::Error)]
pub enum RegistrationError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

impl ErrorCode for RegistrationError {
    fn code(&self) -> &'static str {
        match self {
            RegistrationError::Provider(e) => e.code(),
            RegistrationError::Catalog(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RegistrationReport {
    pub identifier: String,
    pub folder: NodeId,
    pub folders: usize,
    pub items: usize,
    pub total_size: u64,
}

/// Progress callback: percent complete plus a human-readable message.
pub type ProgressFn<'a> = dyn FnMut(u8, &str) + 'a;

pub fn register_dataset(
    catalog: &Catalog,
    providers: &ProviderRegistry,
    identifier: &str,
    parent: &NodeId,
    progress: &mut ProgressFn<'_>,
) -> Result<RegistrationReport, RegistrationError> {
    let parent_node = catalog.get(parent).map_err(|e| match e {
        CatalogError::UnknownNode(id) => CatalogError::UnknownParent(id),
        other => other,
    })?;
    if !parent_node.kind.is_container() {
        return Err(CatalogError::NotAContainer(parent.clone()).into());
    }
    progress(1, &format!("resolving {identifier}"));
    let tree = providers.resolve_tree(identifier)?;
    let total_files = tree.file_count();
    progress(
        10,
        &format!(
            "resolved {} ({} files, {} bytes)",
            tree.descriptor.name, total_files, tree.descriptor.total_size
        ),
    );

    let mut state = Walk {
        catalog,
        progress,
        total_files,
        done_files: 0,
        folders: 0,
        items: 0,
        last_pct: 10,
    };
    let folder = state.register_tree(&tree, parent)?;
    (state.progress)(100, "registration complete");
    Ok(RegistrationReport {
        identifier: identifier.to_string(),
        folder,
        folders: state.folders,
        items: state.items,
        total_size: tree.descriptor.total_size,
    })
}

struct Walk<'a, 'p> {
    catalog: &'a Catalog,
    progress: &'a mut ProgressFn<'p>,
    total_files: usize,
    done_files: usize,
    folders: usize,
    items: usize,
    last_pct: u8,
}

impl Walk<'_, '_> {
    fn folder(&mut self, parent: &NodeId, name: &str) -> Result<NodeId, CatalogError> {
        self.folders += 1;
        Ok(self.catalog.create_unique(Some(parent), NodeKind::Folder, name)?.id)
    }

    fn register_tree(&mut self, tree: &DatasetTree, parent: &NodeId) -> Result<NodeId, CatalogError> {
        let desc = &tree.descriptor;
        let root = self.folder(parent, &desc.name)?;
        let mut dirs: HashMap<String, NodeId> = HashMap::new();
        for entry in &desc.entries {
            let mut parts: Vec<&str> = entry.relative_path.split('/').filter(|p| !p.is_empty()).collect();
            let file_name = parts.pop().unwrap_or(entry.original_name.as_str());
            let mut cur = root.clone();
            let mut key = String::new();
            for dir in parts {
                key.push('/');
                key.push_str(dir);
                cur = match dirs.get(&key) {
                    Some(id) => id.clone(),
                    None => {
                        let id = self.folder(&cur, dir)?;
                        dirs.insert(key.clone(), id.clone());
                        id
                    }
                };
            }
            let item = self.catalog.create_unique(Some(&cur), NodeKind::Item, file_name)?;
            self.catalog.add_file(&item.id, entry.provenance(), entry.size)?;
            self.items += 1;
            self.done_files += 1;
            self.report(&entry.relative_path);
        }
        for child in &tree.children {
            self.register_tree(child, &root)?;
        }
        Ok(root)
    }

    fn report(&mut self, what: &str) {
        let pct = 10 + (89 * self.done_files / self.total_files.max(1)) as u8;
        if pct > self.last_pct {
            self.last_pct = pct;
            (self.progress)(pct, &format!("registered {what}"));
        }
    }
}

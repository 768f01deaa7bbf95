// SPDX-License-Identifier: Apache-2.0

//! Portable tale manifest (`*.tale.json`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{TaleError, TaleMetadata};
use crate::catalog::{Protocol, ProvenanceRecord};

pub const MANIFEST_VERSION: &str = "1";
pub const MANIFEST_EXTENSION: &str = ".tale.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    pub name: String,
    pub repo_url: String,
    pub commit_id: String,
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataEntry {
    /// Path relative to the session root; the first component is the
    /// tale's data folder.
    pub posix_path: String,
    pub size: u64,
    pub source_url: String,
    pub protocol: Protocol,
    pub provider: String,
    pub identifier: String,
    pub original_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
    /// Set when the file is one of several under one item; the item is then
    /// the parent directory of `posix_path`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub bundle: bool,
}

impl DataEntry {
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
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub wholetale_manifest_version: String,
    pub environment: Environment,
    pub data: Vec<DataEntry>,
    pub metadata: TaleMetadata,
}

impl Manifest {
    /// Sorted keys, two-space indent, UTF-8, trailing LF.
    pub fn to_canonical_string(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self, TaleError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| TaleError::SchemaInvalid(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, TaleError> {
        match value.get("wholetale_manifest_version") {
            Some(serde_json::Value::String(v)) if v == MANIFEST_VERSION => {}
            Some(other) => {
                return Err(TaleError::SchemaInvalid(format!(
                    "unsupported manifest version {other}"
                )))
            }
            None => return Err(TaleError::SchemaInvalid("missing wholetale_manifest_version".into())),
        }
        let m: Manifest = serde_json::from_value(value).map_err(|e| TaleError::SchemaInvalid(e.to_string()))?;
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<(), TaleError> {
        let mut seen = std::collections::BTreeSet::new();
        let mut root = None;
        for d in &self.data {
            let parts: Vec<&str> = d.posix_path.split('/').collect();
            let min = if d.bundle { 3 } else { 2 };
            if parts.len() < min || parts.iter().any(|p| crate::catalog::validate_name(p).is_err()) {
                return Err(TaleError::SchemaInvalid(format!("bad posix_path {:?}", d.posix_path)));
            }
            if *root.get_or_insert(parts[0]) != parts[0] {
                return Err(TaleError::SchemaInvalid(
                    "data entries must share one root folder".into(),
                ));
            }
            if !seen.insert(d.posix_path.as_str()) {
                return Err(TaleError::SchemaInvalid(format!(
                    "duplicate posix_path {:?}",
                    d.posix_path
                )));
            }
        }
        Ok(())
    }
}

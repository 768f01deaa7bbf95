// SPDX-License-Identifier: Apache-2.0

//! Single-file web resources (`https:` / `http:` identifiers).

use std::ops::Range;
use std::time::Duration;

use super::{DatasetDescriptor, FileEntry, Provider, ProviderError, Result};
use crate::catalog::Protocol;

pub struct HttpProvider {
    name: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider").field("name", &self.name).finish()
    }
}

impl Default for HttpProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpProvider {
    pub fn new() -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build();
        Self {
            name: "http".to_string(),
            agent: config.into(),
        }
    }
}

fn unavailable(e: ureq::Error) -> ProviderError {
    ProviderError::ProviderUnavailable(e.to_string())
}

impl Provider for HttpProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn schemes(&self) -> Vec<String> {
        vec!["https:".to_string(), "http:".to_string()]
    }

    fn protocols(&self) -> Vec<Protocol> {
        vec![Protocol::Http]
    }

    fn describe(&self, identifier: &str) -> Result<Option<DatasetDescriptor>> {
        let Ok(url) = url::Url::parse(identifier) else {
            return Ok(None);
        };
        let resp = self.agent.head(identifier).call().map_err(unavailable)?;
        let status = resp.status().as_u16();
        if status == 404 || status == 410 {
            return Ok(None);
        }
        if !(200..300).contains(&status) {
            return Err(ProviderError::ProviderUnavailable(format!(
                "{identifier}: HTTP {status}"
            )));
        }
        let size = resp
            .headers()
            .get("content-length")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse::<u64>().ok())
            .ok_or_else(|| ProviderError::ProviderUnavailable(format!("{identifier}: no content-length")))?;
        let name = url
            .path_segments()
            .and_then(|mut s| s.next_back())
            .filter(|s| !s.is_empty())
            .unwrap_or("index")
            .to_string();
        let entry = FileEntry {
            original_name: name.clone(),
            relative_path: name.clone(),
            size,
            source_url: identifier.to_string(),
            protocol: Protocol::Http,
            provider: self.name.clone(),
            identifier: identifier.to_string(),
            checksum: None,
        };
        Ok(Some(DatasetDescriptor {
            identifier: identifier.to_string(),
            name,
            provider: self.name.clone(),
            total_size: size,
            entries: vec![entry],
            sub_datasets: Vec::new(),
        }))
    }

    fn read(&self, entry: &FileEntry, range: Range<u64>) -> Result<Vec<u8>> {
        let mut resp = self
            .agent
            .get(&entry.source_url)
            .header("Range", format!("bytes={}-{}", range.start, range.end - 1))
            .call()
            .map_err(|e| ProviderError::TransferFailed(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = match status {
            200 | 206 => resp
                .body_mut()
                .with_config()
                .limit(u64::MAX)
                .read_to_vec()
                .map_err(|e| ProviderError::TransferFailed(e.to_string()))?,
            404 | 410 => return Err(ProviderError::SourceNotFound(entry.source_url.clone())),
            other => {
                return Err(ProviderError::TransferFailed(format!(
                    "{}: HTTP {other}",
                    entry.source_url
                )))
            }
        };
        if status == 206 {
            Ok(body)
        } else {
            // server ignored the Range header
            let end = (range.end as usize).min(body.len());
            let start = (range.start as usize).min(end);
            Ok(body[start..end].to_vec())
        }
    }
}

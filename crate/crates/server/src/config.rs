// SPDX-License-Identifier: Apache-2.0

//! TOML service configuration.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tale_core::dms::StorageConfig;
use tale_core::engine::{EngineConfig, UserFixture};

use crate::ServeError;

pub const DEFAULT_CORS_ORIGIN: &str = "http://localhost:3000";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    /// Origin allowed to call the API from a browser.
    pub cors_origin: String,
    pub data_dir: Option<PathBuf>,
    /// Host name handed out in instance connection info.
    pub host: String,
    pub runtime_seed: u64,
    pub build_workers: usize,
    pub build_delay_ms: u64,
    pub mock_fixture: Option<PathBuf>,
    pub local_provider: bool,
    pub http_provider: bool,
    pub background_gc: bool,
    pub storage: StorageConfig,
    pub users: Vec<UserFixture>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        let engine = EngineConfig::default();
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            cors_origin: DEFAULT_CORS_ORIGIN.to_string(),
            data_dir: None,
            host: engine.host,
            runtime_seed: engine.runtime_seed,
            build_workers: engine.build_workers,
            build_delay_ms: engine.build_delay.as_millis() as u64,
            mock_fixture: None,
            local_provider: engine.local_provider,
            http_provider: engine.http_provider,
            background_gc: engine.background_gc,
            storage: engine.storage,
            users: Vec::new(),
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServeError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ServeError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ServeError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ServeError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ServeError> {
        if self.build_workers == 0 {
            return Err(ServeError::ConfigInvalid("build_workers must be at least 1".into()));
        }
        if self.cors_origin.parse::<axum::http::HeaderValue>().is_err() {
            return Err(ServeError::ConfigInvalid(format!(
                "bad cors_origin {:?}",
                self.cors_origin
            )));
        }
        self.storage.validate().map_err(ServeError::ConfigInvalid)?;
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            data_dir: self.data_dir.clone(),
            storage: self.storage,
            build_workers: self.build_workers,
            build_delay: Duration::from_millis(self.build_delay_ms),
            runtime_seed: self.runtime_seed,
            host: self.host.clone(),
            mock_fixture: self.mock_fixture.clone(),
            local_provider: self.local_provider,
            http_provider: self.http_provider,
            users: self.users.clone(),
            background_gc: self.background_gc,
            ..EngineConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ServerConfig::from_toml(
            r#"
listen = "0.0.0.0:9000"
[storage]
capacity = 1048576
[[users]]
issuer = "globus"
subject = "alice"
secret = "pw"
"#,
        )
        .unwrap();
        assert_eq!(cfg.listen.port(), 9000);
        assert_eq!(cfg.storage.capacity, 1 << 20);
        assert_eq!(cfg.storage.gc_period, StorageConfig::default().gc_period);
        assert_eq!(cfg.users.len(), 1);
        assert_eq!(cfg.build_workers, 2);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "build_workers = 0",
            "listen = \"nope\"",
            "unknown = 1",
            "[storage]\ncapacity = 0",
        ] {
            let err = ServerConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, ServeError::ConfigInvalid(_)), "{text}: {err}");
        }
    }
}

// SPDX-License-Identifier: Apache-2.0

//! Client settings. A command-line flag beats the environment, which beats
//! the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const DEFAULT_API_URL: &str = "http://127.0.0.1:8080";

/// Contents of `cli.toml`.
#[derive(Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

impl fmt::Debug for FileConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FileConfig")
            .field("api_url", &self.api_url)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl FileConfig {
    /// A missing file reads as empty.
    pub fn load(path: &Path) -> Result<Self, String> {
        match std::fs::read_to_string(path) {
            Ok(text) => toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(format!("{}: {e}", path.display())),
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let text = toml::to_string(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600))?;
        }
        Ok(())
    }
}

/// Inputs taken from the process environment.
#[derive(Clone, Default)]
pub struct Env {
    pub api_url: Option<String>,
    pub token: Option<String>,
    pub config_path: Option<PathBuf>,
}

impl fmt::Debug for Env {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Env")
            .field("api_url", &self.api_url)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .field("config_path", &self.config_path)
            .finish()
    }
}

impl Env {
    pub fn from_process() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        Self {
            api_url: var("WT_API_URL"),
            token: var("WT_TOKEN"),
            config_path: var("WT_CONFIG").map(PathBuf::from).or_else(default_config_path),
        }
    }
}

pub fn default_config_path() -> Option<PathBuf> {
    let base = std::env::var_os("XDG_CONFIG_HOME")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".config")))?;
    Some(base.join("wholetale").join("cli.toml"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Human,
    Json,
}

#[derive(Clone, PartialEq, Eq)]
pub struct CliConfig {
    pub api_url: String,
    pub token: Option<String>,
    pub format: Format,
    pub config_path: Option<PathBuf>,
}

impl fmt::Debug for CliConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CliConfig")
            .field("api_url", &self.api_url)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .field("format", &self.format)
            .field("config_path", &self.config_path)
            .finish()
    }
}

/// Values given on the command line.
#[derive(Clone, Debug, Default)]
pub struct Flags {
    pub api_url: Option<String>,
    pub token: Option<String>,
    pub config: Option<PathBuf>,
    pub json: bool,
}

impl CliConfig {
    pub fn resolve(flags: &Flags, env: &Env) -> Result<Self, String> {
        let config_path = flags.config.clone().or_else(|| env.config_path.clone());
        let file = match &config_path {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        Ok(Self::merge(flags, env, file, config_path))
    }

    pub fn merge(flags: &Flags, env: &Env, file: FileConfig, config_path: Option<PathBuf>) -> Self {
        let api_url = flags
            .api_url
            .clone()
            .or_else(|| env.api_url.clone())
            .or(file.api_url)
            .unwrap_or_else(|| DEFAULT_API_URL.to_string());
        Self {
            api_url: api_url.trim_end_matches('/').to_string(),
            token: flags.token.clone().or_else(|| env.token.clone()).or(file.token),
            format: if flags.json { Format::Json } else { Format::Human },
            config_path,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file() -> FileConfig {
        FileConfig {
            api_url: Some("http://file".into()),
            token: Some("file-token".into()),
        }
    }

    #[test]
    fn flag_beats_env_beats_file() {
        let env = Env {
            api_url: Some("http://env".into()),
            token: Some("env-token".into()),
            config_path: None,
        };
        let flags = Flags {
            api_url: Some("http://flag/".into()),
            ..Flags::default()
        };
        let c = CliConfig::merge(&flags, &env, file(), None);
        assert_eq!(c.api_url, "http://flag");
        assert_eq!(c.token.as_deref(), Some("env-token"));
        let c = CliConfig::merge(&Flags::default(), &Env::default(), file(), None);
        assert_eq!(
            (c.api_url.as_str(), c.token.as_deref()),
            ("http://file", Some("file-token"))
        );
        let c = CliConfig::merge(&Flags::default(), &Env::default(), FileConfig::default(), None);
        assert_eq!((c.api_url.as_str(), c.token), (DEFAULT_API_URL, None));
    }

    #[test]
    fn debug_output_hides_token() {
        let c = CliConfig::merge(&Flags::default(), &Env::default(), file(), None);
        let text = format!("{c:?} {:?}", file());
        assert!(!text.contains("file-token"), "{text}");
    }

    #[test]
    fn file_round_trips_and_missing_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/cli.toml");
        assert_eq!(FileConfig::load(&path).unwrap(), FileConfig::default());
        file().save(&path).unwrap();
        assert_eq!(FileConfig::load(&path).unwrap(), file());
        std::fs::write(&path, "bogus = 1").unwrap();
        assert!(FileConfig::load(&path).is_err());
    }
}

//! Settings resolution: command-line flags, then `CORE_*` environment
//! variables (both handled by clap), then the `core.toml` key/value file.

use std::path::{Path, PathBuf};

use anyhow::Context;
use core_engine::BackendConfig;
use serde::Deserialize;

pub const DEFAULT_CONFIG_FILE: &str = "core.toml";
pub const DEFAULT_DATA_DIR: &str = "core-data";
pub const DEFAULT_HOST: &str = "127.0.0.1";
pub const DEFAULT_PORT: u16 = 8080;

/// Keys accepted in the config file. Every key is optional.
#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub host: Option<String>,
    pub port: Option<u16>,
    pub ui_dir: Option<PathBuf>,
    pub server: Option<String>,
    pub backend: Option<String>,
    pub http_base_url: Option<String>,
    pub http_model: Option<String>,
    pub transcript: Option<PathBuf>,
}

impl FileConfig {
    /// Reads `path`, or `core.toml` in the working directory when no path is
    /// given. A missing default file is an empty config; a missing explicit
    /// file is an error.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let (path, required) = match path {
            Some(p) => (p.to_path_buf(), true),
            None => (PathBuf::from(DEFAULT_CONFIG_FILE), false),
        };
        if !required && !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Values given on the command line or through the environment. `None`
/// means neither was set.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub host: Option<String>,
    pub port: Option<u16>,
    pub ui_dir: Option<PathBuf>,
    pub server: Option<String>,
    pub backend: Option<String>,
    pub http_base_url: Option<String>,
    pub http_model: Option<String>,
    pub transcript: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub data_dir: PathBuf,
    pub host: String,
    pub port: u16,
    pub ui_dir: Option<PathBuf>,
    pub server: Option<String>,
    pub backend: BackendConfig,
}

impl Settings {
    pub fn resolve(over: Overrides, file: FileConfig) -> anyhow::Result<Self> {
        let backend_vars = [
            ("CORE_BACKEND", over.backend.or(file.backend)),
            ("CORE_HTTP_BASE_URL", over.http_base_url.or(file.http_base_url)),
            ("CORE_HTTP_MODEL", over.http_model.or(file.http_model)),
            ("CORE_TRANSCRIPT", over.transcript.or(file.transcript).map(|p| p.display().to_string())),
        ];
        let backend = BackendConfig::from_lookup(|key| {
            backend_vars.iter().find(|(k, _)| *k == key).and_then(|(_, v)| v.clone())
        })?;
        Ok(Settings {
            data_dir: over.data_dir.or(file.data_dir).unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR)),
            host: over.host.or(file.host).unwrap_or_else(|| DEFAULT_HOST.to_string()),
            port: over.port.or(file.port).unwrap_or(DEFAULT_PORT),
            ui_dir: over.ui_dir.or(file.ui_dir),
            server: over.server.or(file.server),
            backend,
        })
    }
}

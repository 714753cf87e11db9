//! Application configuration, read from `<data_dir>/config`.
//!
//! The file is TOML, or JSON when its first non-blank character is `{`.
//! Every key is optional. Command-line flags are applied on top by the
//! callers.

use std::fs;
use std::io;
use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardware::HardwareProfile;
use crate::inference::{Backend, ExternalConfig, ExternalRuntimeBackend, GenerationParams, StubBackend, StubConfig};
use crate::net::NetworkLayer;
use crate::selector::SelectionPolicy;
use crate::session::{DEFAULT_MAX_SESSIONS, DEFAULT_RETRIEVAL_K};

pub const CONFIG_FILE: &str = "config";
pub const DEFAULT_PORT: u16 = 8390;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Stub,
    External,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "stub" => Ok(Self::Stub),
            "external" => Ok(Self::External),
            other => Err(format!("unknown backend '{other}' (expected stub or external)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerSection {
    pub bind_address: IpAddr,
    pub port: u16,
    pub allow_lan: bool,
    pub static_ui_dir: Option<PathBuf>,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            bind_address: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: DEFAULT_PORT,
            allow_lan: false,
            static_ui_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub headroom_factor: f64,
    pub allow_manual_pin: bool,
    pub pinned_model: Option<String>,
    pub hardware_override: Option<HardwareProfile>,
    pub backend: BackendKind,
    pub stub: StubConfig,
    pub external: ExternalConfig,
    pub generation: GenerationParams,
    pub retrieval_k: usize,
    pub max_sessions: usize,
    pub server: ServerSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        let policy = SelectionPolicy::default();
        Self {
            headroom_factor: policy.headroom_factor,
            allow_manual_pin: policy.allow_manual_pin,
            pinned_model: None,
            hardware_override: None,
            backend: BackendKind::Stub,
            stub: StubConfig::default(),
            external: ExternalConfig::default(),
            generation: GenerationParams::default(),
            retrieval_k: DEFAULT_RETRIEVAL_K,
            max_sessions: DEFAULT_MAX_SESSIONS,
            server: ServerSection::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl AppConfig {
    /// Reads `<data_dir>/config`; a missing file yields the defaults.
    pub fn load(data_dir: &Path) -> Result<Self, ConfigError> {
        let path = data_dir.join(CONFIG_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => Self::parse(&text).map_err(|message| ConfigError::Parse { path, message }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::default()),
            Err(source) => Err(ConfigError::Io { path, source }),
        }
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let config: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| e.to_string())?
        } else {
            toml::from_str(text).map_err(|e| e.to_string())?
        };
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.policy()?;
        self.generation
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(hw) = &self.hardware_override {
            hw.validate()
                .map_err(|e| ConfigError::Invalid(format!("hardware_override: {e}")))?;
        }
        if self.max_sessions == 0 {
            return Err(ConfigError::Invalid("max_sessions must be at least 1".into()));
        }
        Ok(())
    }

    pub fn policy(&self) -> Result<SelectionPolicy, ConfigError> {
        SelectionPolicy::new(self.headroom_factor, self.allow_manual_pin).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn build_backend(&self, net: Arc<dyn NetworkLayer>) -> Result<Arc<dyn Backend>, ConfigError> {
        Ok(match self.backend {
            BackendKind::Stub => Arc::new(StubBackend::new(self.stub.clone())),
            BackendKind::External => Arc::new(
                ExternalRuntimeBackend::new(self.external.clone(), net)
                    .map_err(|e| ConfigError::Invalid(format!("external backend: {e}")))?,
            ),
        })
    }
}

/// Standard locations under the data directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataLayout {
    pub root: PathBuf,
}

impl DataLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn levels_dir(&self) -> PathBuf {
        self.root.join("levels")
    }

    pub fn sessions_snapshot(&self) -> PathBuf {
        self.root.join(crate::session::SNAPSHOT_FILE)
    }
}

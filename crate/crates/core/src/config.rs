//! Service configuration: an optional TOML file overlaid by environment
//! variables. The provider API key is only ever read from the environment.
//!
//! ```toml
//! port = 8080
//! store_dir = "sessions"
//! personas = "extra-personas.toml"
//!
//! [provider]
//! endpoint = "https://api.openai.com/v1"
//! agent_model = "gpt-4o-mini"
//! selector_model = ""
//! timeout_secs = 60
//!
//! [coordinator]
//! round_size = 3
//! context_window = 30
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::coordinator::CoordinatorConfig;

pub const ENV_API_KEY: &str = "CULTIVAGENTS_API_KEY";
pub const ENV_ENDPOINT: &str = "CULTIVAGENTS_ENDPOINT";
pub const ENV_AGENT_MODEL: &str = "CULTIVAGENTS_AGENT_MODEL";
pub const ENV_SELECTOR_MODEL: &str = "CULTIVAGENTS_SELECTOR_MODEL";
pub const ENV_PORT: &str = "CULTIVAGENTS_PORT";
pub const ENV_STORE_DIR: &str = "CULTIVAGENTS_STORE_DIR";
pub const ENV_PERSONAS: &str = "CULTIVAGENTS_PERSONAS";
pub const ENV_BUILTIN_PERSONAS: &str = "CULTIVAGENTS_BUILTIN_PERSONAS";
pub const ENV_ROUND_SIZE: &str = "CULTIVAGENTS_K";
pub const ENV_CONTEXT_WINDOW: &str = "CULTIVAGENTS_CONTEXT_WINDOW";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSettings {
    pub endpoint: String,
    pub agent_model: String,
    /// Empty means: use the agent model.
    pub selector_model: String,
    pub timeout_secs: u64,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            agent_model: "gpt-4o-mini".into(),
            selector_model: String::new(),
            timeout_secs: crate::provider::DEFAULT_TIMEOUT.as_secs(),
        }
    }
}

impl ProviderSettings {
    pub fn selector_model(&self) -> &str {
        if self.selector_model.is_empty() {
            &self.agent_model
        } else {
            &self.selector_model
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    pub store_dir: PathBuf,
    /// Plug-in persona file merged into the built-in set.
    pub personas: Option<PathBuf>,
    /// Replacement for the built-in persona file shipped with the binary.
    pub builtin_personas: Option<PathBuf>,
    pub provider: ProviderSettings,
    pub coordinator: CoordinatorConfig,
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            store_dir: PathBuf::from("sessions"),
            personas: None,
            builtin_personas: None,
            provider: ProviderSettings::default(),
            coordinator: CoordinatorConfig::default(),
            api_key: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("environment variable {var}: {message}")]
    Env { var: &'static str, message: String },
    #[error("missing required environment variable {0}")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
}

impl ServiceConfig {
    /// Read `path` (if given), then apply environment overrides from `env`.
    pub fn load(
        path: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigFileError> {
        let mut config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigFileError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                toml::from_str(&text).map_err(|e| ConfigFileError::Parse {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?
            }
            None => ServiceConfig::default(),
        };
        config.apply_env(env)?;
        config
            .coordinator
            .validate()
            .map_err(|e| ConfigFileError::Invalid(e.to_string()))?;
        Ok(config)
    }

    /// Load using the process environment.
    pub fn from_process_env(path: Option<&Path>) -> Result<Self, ConfigFileError> {
        Self::load(path, |k| std::env::var(k).ok())
    }

    fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigFileError> {
        let get = |var: &str| env(var).filter(|v| !v.trim().is_empty());
        if let Some(v) = get(ENV_API_KEY) {
            self.api_key = Some(v);
        }
        if let Some(v) = get(ENV_ENDPOINT) {
            self.provider.endpoint = v;
        }
        if let Some(v) = get(ENV_AGENT_MODEL) {
            self.provider.agent_model = v;
        }
        if let Some(v) = get(ENV_SELECTOR_MODEL) {
            self.provider.selector_model = v;
        }
        if let Some(v) = get(ENV_PORT) {
            self.port = parse_env(ENV_PORT, &v)?;
        }
        if let Some(v) = get(ENV_STORE_DIR) {
            self.store_dir = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_PERSONAS) {
            self.personas = Some(PathBuf::from(v));
        }
        if let Some(v) = get(ENV_BUILTIN_PERSONAS) {
            self.builtin_personas = Some(PathBuf::from(v));
        }
        if let Some(v) = get(ENV_ROUND_SIZE) {
            self.coordinator.round_size = parse_env(ENV_ROUND_SIZE, &v)?;
        }
        if let Some(v) = get(ENV_CONTEXT_WINDOW) {
            self.coordinator.context_window = parse_env(ENV_CONTEXT_WINDOW, &v)?;
        }
        Ok(())
    }

    /// The API key, required in live (non-scripted) mode.
    pub fn require_api_key(&self) -> Result<&str, ConfigFileError> {
        self.api_key
            .as_deref()
            .ok_or(ConfigFileError::Missing(ENV_API_KEY))
    }
}

fn parse_env<T: std::str::FromStr>(var: &'static str, value: &str) -> Result<T, ConfigFileError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigFileError::Env {
        var,
        message: format!("`{value}`: {e}"),
    })
}

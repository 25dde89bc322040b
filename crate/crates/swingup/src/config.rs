//! TOML configuration loading with messages precise enough to fix the file
//! without reading source code.

use std::path::Path;

use thiserror::Error;

use crate::protocols::{ExperimentConfig, ProtocolError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// The toml parser reports line and column in its message.
    #[error("invalid TOML in {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid configuration in {path}: {source}")]
    Invalid {
        path: String,
        #[source]
        source: ProtocolError,
    },
    #[error("cannot serialize configuration: {0}")]
    Serialize(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Parse and validate a configuration file. Missing sections and fields
/// take their defaults; unknown keys are rejected.
pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Read { path: display.clone(), source })?;
    from_str(&text, &display)
}

pub fn from_str(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text)
        .map_err(|source| ConfigError::Parse { path: origin.into(), source: Box::new(source) })?;
    cfg.validate()
        .map_err(|source| ConfigError::Invalid { path: origin.into(), source })?;
    Ok(cfg)
}

/// Canonical serialization used for the manifest hash: a config loaded
/// from disk and one built in code hash identically if they are equal.
pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    Ok(toml::to_string_pretty(cfg)?)
}

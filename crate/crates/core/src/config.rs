//! Reading [`RepairConfig`] from a TOML file.
//!
//! Keys mirror the struct fields; anything omitted keeps its default.

use std::path::{Path, PathBuf};

use crate::domain::{ConfigError, RepairConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigFileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Invalid { path: PathBuf, source: ConfigError },
}

pub fn parse_config(text: &str) -> Result<RepairConfig, String> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let known = serde_json::to_value(RepairConfig::default()).expect("config serializes");
    let known = known.as_object().expect("config is an object");
    if let Some(key) = table.keys().find(|k| !known.contains_key(*k)) {
        return Err(format!("unknown key `{key}`"));
    }
    table.try_into().map_err(|e: toml::de::Error| e.to_string())
}

pub fn load_config(path: &Path) -> Result<RepairConfig, ConfigFileError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let config = parse_config(&text).map_err(|message| ConfigFileError::Parse {
        path: path.to_path_buf(),
        message,
    })?;
    config
        .validate()
        .map_err(|source| ConfigFileError::Invalid {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(config)
}

//! TOML run configuration.

use std::path::Path;

use flowsynth_core::pipeline::RunConfig;

#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Invalid(String),
}

/// Reads `path` as a [`RunConfig`]; missing keys keep their defaults.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    parse_run_config(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))
}

pub fn parse_run_config(text: &str) -> Result<RunConfig, toml::de::Error> {
    toml::from_str(text)
}

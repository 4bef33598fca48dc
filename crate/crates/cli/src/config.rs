//! Config loading: TOML or JSON, `--set` overrides and the seed variable.

use std::path::Path;

use serde_json::Value;
use structlora::harness::ExperimentConfig;

pub const SEED_ENV: &str = "STRUCTLORA_SEED";

/// A configuration problem, reported with exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("override `{0}` is not of the form key=value")]
    OverrideSyntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("{SEED_ENV}={0} is not an unsigned integer")]
    SeedEnv(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn is_json(path: &Path, text: &str) -> bool {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => true,
        Some("toml") => false,
        _ => text.trim_start().starts_with('{'),
    }
}

/// Parses a config file. Errors carry the line and column of the problem.
pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse(path, &text)
}

pub fn parse(path: &Path, text: &str) -> Result<ExperimentConfig, ConfigError> {
    let parse_err = |message: String| ConfigError::Parse {
        path: path.display().to_string(),
        message,
    };
    if is_json(path, text) {
        serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))
    } else {
        toml::from_str(text).map_err(|e| parse_err(e.to_string().trim_end().to_string()))
    }
}

/// Parses the right-hand side of `key=value` as a TOML literal, falling back
/// to a bare string so `variant=lora` works without quotes.
fn parse_value(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => {
            serde_json::to_value(t.remove("v").expect("key present")).unwrap_or(Value::Null)
        }
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `key=value` overrides on top of a parsed config.
pub fn apply_overrides(
    cfg: &ExperimentConfig,
    overrides: &[String],
) -> Result<ExperimentConfig, ConfigError> {
    let mut value = serde_json::to_value(cfg).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .expect("config serialises to an object");
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| ConfigError::OverrideSyntax(item.clone()))?;
        let key = key.trim();
        let canonical = match key {
            "layers" => "L",
            "depth" => "T",
            other => other,
        };
        if !obj.contains_key(canonical) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        obj.insert(canonical.to_string(), parse_value(raw.trim()));
        // Re-check each override so the message names the offending key.
        serde_json::from_value::<ExperimentConfig>(Value::Object(obj.clone())).map_err(|e| {
            ConfigError::BadValue {
                key: key.to_string(),
                message: e.to_string(),
            }
        })?;
    }
    serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))
}

/// Reads the seed override from the environment, if set.
pub fn env_seed() -> Result<Option<u64>, ConfigError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| ConfigError::SeedEnv(s)),
        Err(_) => Ok(None),
    }
}

/// File, then environment seed, then `--set` overrides; validated.
pub fn resolve(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = load(path)?;
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    let cfg = apply_overrides(&cfg, overrides)?;
    cfg.validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

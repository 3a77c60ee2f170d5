//! Training configuration: file < `EDGEKIT_*` environment < `--set`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use edgekit::TrainConfig;
use serde_json::Value;

pub const ENV_PREFIX: &str = "EDGEKIT_";

pub fn read_file(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg: TrainConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| edgekit::Error::Config(format!("{}: {e}", path.display())))?,
        _ => serde_json::from_str(&text).map_err(|e| edgekit::Error::Config(format!("{}: {e}", path.display())))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Maps `EDGEKIT_ENCODER__LSTM_HIDDEN` to `encoder.lstm_hidden`.
pub fn env_key(var: &str) -> Option<String> {
    let rest = var.strip_prefix(ENV_PREFIX)?;
    Some(rest.to_ascii_lowercase().replace("__", "."))
}

fn has_key(cfg: &TrainConfig, key: &str) -> bool {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    for part in key.split('.') {
        match v.get_mut(part) {
            Some(next) => v = next.take(),
            None => return false,
        }
    }
    true
}

pub fn resolve(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    overrides: &[String],
) -> Result<TrainConfig> {
    let mut cfg = match file {
        Some(p) => read_file(p)?,
        None => TrainConfig::default(),
    };
    let mut vars: Vec<(String, String)> = env.into_iter().collect();
    vars.sort();
    for (var, value) in vars {
        let Some(key) = env_key(&var) else { continue };
        // other EDGEKIT_* variables (test data locations, ...) are not config
        if has_key(&cfg, &key) {
            cfg.set(&key, &value).with_context(|| format!("from {var}"))?;
        }
    }
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!(edgekit::Error::Config(format!("override {o:?} is not key=value")));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

/// Pretty JSON of the resolved configuration.
pub fn show(cfg: &TrainConfig) -> String {
    serde_json::to_string_pretty(&serde_json::to_value(cfg).unwrap_or(Value::Null)).unwrap_or_default()
}

//! Flat JSON configuration with `flag > file > default` precedence.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

/// Relative output paths are resolved against this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "ROUGHSEG_OUTPUT_ROOT";

pub type Layer = Map<String, Value>;

/// Reads a flat JSON object. Nested objects are rejected.
pub fn read_file(path: &Path) -> Result<Layer> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let Value::Object(map) = value else {
        bail!("config {}: top level must be a JSON object", path.display());
    };
    if let Some((k, _)) = map.iter().find(|(_, v)| v.is_object()) {
        bail!("config {}: key `{k}` holds an object; the config format is flat", path.display());
    }
    Ok(map)
}

/// Merges `file` under `flags` and deserializes the result, so that a flag
/// beats the file and the file beats the struct's own defaults.
pub fn resolve<T: DeserializeOwned>(file: Option<&Path>, flags: Layer) -> Result<T> {
    let mut merged = match file {
        Some(p) => read_file(p)?,
        None => Layer::new(),
    };
    merged.extend(flags);
    let source = file.map_or_else(|| "command line".to_string(), |p| p.display().to_string());
    serde_json::from_value(Value::Object(merged)).with_context(|| format!("invalid configuration ({source})"))
}

/// Value of a required key, or an error naming it.
pub fn require<T: Clone>(value: &Option<T>, key: &str) -> Result<T> {
    value
        .clone()
        .with_context(|| format!("missing required key `{key}` (set it in the config file or pass the flag)"))
}

/// Output directory: `value` if set, otherwise `default`; relative paths sit
/// under `$ROUGHSEG_OUTPUT_ROOT` when that is set.
pub fn output_path(value: Option<&Path>, default: &str) -> PathBuf {
    let p = value.map_or_else(|| PathBuf::from(default), Path::to_path_buf);
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() && !root.is_empty() => PathBuf::from(root).join(p),
        _ => p,
    }
}

/// Builds a flag layer from `(key, Option<value>)` pairs, skipping `None`.
#[macro_export]
macro_rules! flags {
    ($($key:literal => $val:expr),* $(,)?) => {{
        let mut m = $crate::config::Layer::new();
        $(
            if let Some(v) = $val {
                m.insert($key.to_string(), serde_json::to_value(v).expect("flag serializes"));
            }
        )*
        m
    }};
}

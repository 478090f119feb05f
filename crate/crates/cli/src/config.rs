use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Layers a JSON config file and then flag overrides onto `T::default()`.
/// Null overrides (unset flags) leave the value below them untouched.
pub fn resolve<T>(file: Option<&Path>, overrides: Value) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut merged = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        overlay(&mut merged, value);
    }
    overlay(&mut merged, overrides);
    serde_json::from_value(merged).context("invalid configuration")
}

fn overlay(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(base), Value::Object(patch)) => {
            for (key, value) in patch {
                if value.is_null() {
                    continue;
                }
                overlay(base.entry(key).or_insert(Value::Null), value);
            }
        }
        (base, patch) => *base = patch,
    }
}

/// Sibling file of `out` holding the resolved config: `m.nmj` -> `m.config.json`.
pub fn config_path(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

/// Writes the resolved config next to the artifact and returns it as JSON.
pub fn persist<T: Serialize>(out: &Path, config: &T) -> Result<Value> {
    let value = serde_json::to_value(config)?;
    let path = config_path(out);
    std::fs::write(&path, serde_json::to_string_pretty(&value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(value)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

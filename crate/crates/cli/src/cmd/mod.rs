pub mod bench;
pub mod eval;
pub mod finetune;
pub mod inspect;
pub mod merge;
pub mod train;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use neuralmerger::format::manifest_kind;
use neuralmerger::netdef::{load_model, Model};
use neuralmerger::quantize::{load_merged, MergedModel};
use serde_json::{json, Value};

/// Either artifact kind, dispatched on the manifest's `kind` field.
pub enum Artifact {
    Model(Model),
    Merged(MergedModel),
}

pub fn load_artifact(path: &Path) -> Result<Artifact> {
    let kind = manifest_kind(path)?;
    match kind.as_str() {
        "model" => Ok(Artifact::Model(load_model(path)?)),
        "merged" => Ok(Artifact::Merged(load_merged(path)?)),
        other => bail!("{}: unknown artifact kind `{other}`", path.display()),
    }
}

pub fn load_models(paths: &[PathBuf]) -> Result<Vec<Model>> {
    paths
        .iter()
        .map(|p| load_model(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

/// Provenance block stored in every artifact the CLI writes.
pub fn provenance(command: &str, config: Value, extra: Value) -> Value {
    let mut out = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
    });
    if let (Value::Object(out), Value::Object(extra)) = (&mut out, extra) {
        out.extend(extra);
    }
    out
}

/// Original model paths recorded by `merge` or `finetune`.
pub fn recorded_originals(provenance: Option<&Value>) -> Option<Vec<PathBuf>> {
    let list = provenance?.get("originals")?.as_array()?;
    list.iter().map(|v| v.as_str().map(PathBuf::from)).collect()
}

pub fn percent(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

/// Accuracy drop in percentage points; positive means worse.
pub fn drop_points(reference: f64, accuracy: f64) -> f64 {
    let d = 100.0 * (reference - accuracy);
    // Keep a lossless result from printing as -0.00.
    if d.abs() < 5e-9 {
        0.0
    } else {
        d
    }
}

pub fn path_strings(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use neuralmerger::align::{default_plan, AlignmentPlan};
use neuralmerger::netdef::Model;
use neuralmerger::quantize::{
    build_merged, compression_stats, save_merged, KMeansConfig, LayerParams, MergeParams,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cmd::{load_models, path_strings, provenance};
use crate::config::{persist, read_json, resolve};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub models: Vec<PathBuf>,
    /// `{"conv1": {"r": 8, "C": 128}, ...}`; a `default` key covers the rest.
    pub params: MergeParams,
    /// Input-anchored pairing when absent.
    pub plan: Option<AlignmentPlan>,
    pub kmeans: KMeansConfig,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, num_args = 2..)]
    pub models: Option<Vec<PathBuf>>,
    /// JSON file of per-layer (r, C).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Lossless quantization with segment length R for every layer.
    #[arg(long, value_name = "R", conflicts_with = "params")]
    pub lossless: Option<usize>,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: MergeArgs) -> Result<()> {
    let mut cfg: MergeConfig = resolve(
        args.config.as_deref(),
        json!({
            "models": args.models,
            "kmeans": {
                "restarts": args.restarts,
                "max_iters": args.max_iters,
                "seed": args.seed,
            },
        }),
    )?;
    // Whole-object flags replace rather than overlay.
    if let Some(path) = &args.params {
        cfg.params = read_json(path)?;
    }
    if let Some(r) = args.lossless {
        cfg.params = MergeParams::uniform(LayerParams::lossless(r));
    }
    if let Some(path) = &args.plan {
        cfg.plan = Some(read_json(path)?);
    }
    if cfg.models.len() < 2 {
        bail!("merge needs at least two --models");
    }
    if cfg.params.0.is_empty() {
        bail!("no merge parameters: pass --params or --lossless");
    }

    let models = load_models(&cfg.models)?;
    let refs: Vec<&Model> = models.iter().collect();
    let plan = match &cfg.plan {
        Some(plan) => plan.clone().with_unpaired(&refs),
        None => default_plan(&refs)?,
    };
    cfg.plan = Some(plan.clone());

    let mut merged = build_merged(&refs, &plan, &cfg.params, &cfg.kmeans)?;
    let config = persist(&args.out, &cfg)?;
    merged.provenance = Some(provenance(
        "merge",
        config,
        json!({ "originals": path_strings(&cfg.models) }),
    ));
    save_merged(&merged, &args.out)?;

    let report = compression_stats(&refs, &merged);
    for layer in &report.layers {
        println!(
            "{:<8} r={:<3} C={:<6} segments {:>3} (shared {:>3})  {:>10} B -> {:>10} B  {:.2}x",
            layer.name,
            layer.r,
            layer.c,
            layer.segments,
            layer.shared_segments,
            layer.original_bytes,
            layer.merged_bytes,
            layer.ratio
        );
    }
    println!(
        "merged {} models: coefficients {:.2}x, whole model {:.2}x",
        models.len(),
        report.coefficients.ratio,
        report.whole_model.ratio
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

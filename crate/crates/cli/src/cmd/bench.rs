use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use neuralmerger::bench::{measure_speedup, BenchConfig};
use neuralmerger::netdef::{Model, Split};
use neuralmerger::quantize::load_merged;
use neuralmerger::synth::{generate, Family, SynthConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cmd::{load_models, recorded_originals};
use crate::config::{persist, resolve};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchRunConfig {
    pub merged: PathBuf,
    /// Taken from the merged model's provenance when empty.
    pub baselines: Vec<PathBuf>,
    /// Synthetic inputs timed per task and repetition.
    pub inputs: usize,
    pub input_seed: u64,
    pub bench: BenchConfig,
}

impl Default for BenchRunConfig {
    fn default() -> Self {
        Self {
            merged: PathBuf::new(),
            baselines: Vec::new(),
            inputs: 8,
            input_seed: 0,
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub merged: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub baselines: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub inputs: Option<usize>,
    /// Iterations of the cost-model microbenchmarks; 0 skips prediction.
    #[arg(long)]
    pub calibration_iterations: Option<usize>,
    #[arg(long)]
    pub no_pin: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for report.json, report.md and the resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: BenchArgs) -> Result<()> {
    let mut cfg: BenchRunConfig = resolve(
        args.config.as_deref(),
        json!({
            "merged": args.merged,
            "baselines": args.baselines,
            "inputs": args.inputs,
            "input_seed": args.seed,
            "bench": {
                "repetitions": args.repetitions,
                "warmup": args.warmup,
                "calibration_iterations": args.calibration_iterations,
                "pin": args.no_pin.then_some(false),
            },
        }),
    )?;
    if cfg.merged.as_os_str().is_empty() {
        bail!("--merged is required");
    }
    if cfg.inputs == 0 {
        bail!("--inputs must be positive");
    }
    let merged = load_merged(&cfg.merged).with_context(|| format!("loading {}", cfg.merged.display()))?;
    if cfg.baselines.is_empty() {
        cfg.baselines = recorded_originals(merged.provenance.as_ref())
            .context("no --baselines given and none recorded in the merged model")?;
    }
    let baselines = load_models(&cfg.baselines)?;
    let refs: Vec<&Model> = baselines.iter().collect();

    let inputs = merged
        .tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let synth = SynthConfig {
                shape: task.input_shape,
                train: 0,
                test: cfg.inputs,
                seed: cfg.input_seed,
                ..SynthConfig::default()
            };
            Ok(generate(Family::ALL[t % Family::ALL.len()], Split::Test, &synth)?.images)
        })
        .collect::<Result<Vec<_>>>()?;

    let report = measure_speedup(&merged, &refs, &inputs, &cfg.bench)?;
    let markdown = report.to_markdown();
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            persist(&dir.join("report.json"), &cfg)?;
            std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            std::fs::write(dir.join("report.md"), &markdown)?;
            print!("{markdown}");
            println!("\nwrote {}", dir.display());
        }
        None => print!("{markdown}"),
    }
    Ok(())
}

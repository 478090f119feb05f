use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use neuralmerger::einfer::merged_accuracy;
use neuralmerger::etrain::accuracy;
use neuralmerger::netdef::{load_model, Split};
use neuralmerger::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cmd::{drop_points, load_artifact, percent, recorded_originals, Artifact};
use crate::config::resolve;
use crate::data::DataSource;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub model: PathBuf,
    /// Task name, letter or index; required for merged models.
    pub task: Option<String>,
    /// Split defaults to `test` for synthetic sources.
    pub data: String,
    /// Defaults to the task's original model recorded in the merged model.
    pub reference: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Print a JSON object instead of text.
    #[arg(long)]
    pub json: bool,
}

pub fn run(args: EvalArgs) -> Result<()> {
    let cfg: EvalConfig = resolve(
        args.config.as_deref(),
        json!({
            "model": args.model,
            "task": args.task,
            "data": args.data,
            "reference": args.reference,
            "synth": {
                "test": args.test_size,
                "noise": args.noise,
                "seed": args.data_seed,
            },
        }),
    )?;
    if cfg.model.as_os_str().is_empty() || cfg.data.is_empty() {
        bail!("--model and --data are required");
    }
    let source = DataSource::parse(&cfg.data)?;

    let (label, score, reference) = match load_artifact(&cfg.model)? {
        Artifact::Model(model) => {
            let data = source.load(&cfg.synth, Some(model.input_shape), Split::Test)?;
            (model.name.clone(), accuracy(&model, &data)?, cfg.reference.clone())
        }
        Artifact::Merged(merged) => {
            let task = cfg
                .task
                .as_deref()
                .context("--task is required for a merged model")?;
            let t = merged.task_index(task)?;
            let data = source.load(&cfg.synth, Some(merged.tasks[t].input_shape), Split::Test)?;
            let reference = cfg.reference.clone().or_else(|| {
                recorded_originals(merged.provenance.as_ref()).and_then(|o| o.get(t).cloned())
            });
            (merged.tasks[t].name.clone(), merged_accuracy(&merged, t, &data)?, reference)
        }
    };

    let reference_accuracy = match &reference {
        Some(path) => {
            let model = load_model(path).with_context(|| format!("loading reference {}", path.display()))?;
            let data = source.load(&cfg.synth, Some(model.input_shape), Split::Test)?;
            Some(accuracy(&model, &data)?)
        }
        None => None,
    };
    let drop = reference_accuracy.map(|r| drop_points(r, score));

    if args.json {
        println!(
            "{}",
            json!({
                "task": label,
                "accuracy": score,
                "reference_accuracy": reference_accuracy,
                "drop_points": drop,
            })
        );
    } else {
        match (reference_accuracy, drop) {
            (Some(r), Some(d)) => println!(
                "{label}: accuracy {} (reference {}, drop {d:.2}%)",
                percent(score),
                percent(r)
            ),
            _ => println!("{label}: accuracy {}", percent(score)),
        }
    }
    Ok(())
}

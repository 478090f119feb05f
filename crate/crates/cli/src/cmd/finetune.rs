use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use neuralmerger::etrain::{calibrate, CalibrationConfig, TaskData};
use neuralmerger::netdef::{Model, Split};
use neuralmerger::quantize::{load_merged, save_merged};
use neuralmerger::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cmd::{load_models, path_strings, percent, provenance, recorded_originals};
use crate::config::{persist, resolve};
use crate::data::DataSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub merged: PathBuf,
    /// Taken from the merged model's provenance when empty.
    pub originals: Vec<PathBuf>,
    /// One training-data source per task, in task order.
    pub data: Vec<String>,
    /// Share of each task's training data held out for model selection;
    /// 0 selects on the training data itself.
    pub validation_fraction: f64,
    pub calibration: CalibrationConfig,
    pub synth: SynthConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            merged: PathBuf::new(),
            originals: Vec::new(),
            data: Vec::new(),
            validation_fraction: 0.2,
            calibration: CalibrationConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub merged: Option<PathBuf>,
    #[arg(long)]
    pub data_a: Option<String>,
    #[arg(long)]
    pub data_b: Option<String>,
    #[arg(long)]
    pub data_c: Option<String>,
    /// Further tasks, appended after --data-a/b/c.
    #[arg(long)]
    pub data: Vec<String>,
    #[arg(long, num_args = 1..)]
    pub originals: Option<Vec<PathBuf>>,
    /// Fraction of each task's training data used.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub validation: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Keep biases and classifiers fixed; only codebooks move.
    #[arg(long)]
    pub freeze_unquantized: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: FinetuneArgs) -> Result<()> {
    let data: Vec<String> = [args.data_a, args.data_b, args.data_c]
        .into_iter()
        .flatten()
        .chain(args.data)
        .collect();
    let mut cfg: FinetuneConfig = resolve(
        args.config.as_deref(),
        json!({
            "merged": args.merged,
            "originals": args.originals,
            "data": (!data.is_empty()).then_some(data),
            "validation_fraction": args.validation,
            "calibration": {
                "data_fraction": args.fraction,
                "epochs": args.epochs,
                "learning_rate": args.lr,
                "momentum": args.momentum,
                "lambda_mismatch": args.lambda,
                "batch_size": args.batch_size,
                "seed": args.seed,
                "freeze_unquantized": args.freeze_unquantized.then_some(true),
            },
            "synth": {
                "train": args.train_size,
                "noise": args.noise,
                "seed": args.data_seed,
            },
        }),
    )?;
    if cfg.merged.as_os_str().is_empty() {
        bail!("--merged is required");
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        bail!("validation fraction must lie in [0, 1)");
    }

    let merged = load_merged(&cfg.merged).with_context(|| format!("loading {}", cfg.merged.display()))?;
    if cfg.originals.is_empty() {
        cfg.originals = recorded_originals(merged.provenance.as_ref())
            .context("no --originals given and none recorded in the merged model")?;
    }
    let tasks = merged.tasks.len();
    if cfg.data.len() != tasks {
        bail!("merged model has {tasks} tasks but {} data sources were given", cfg.data.len());
    }
    let originals = load_models(&cfg.originals)?;
    let refs: Vec<&Model> = originals.iter().collect();

    let mut task_data = Vec::with_capacity(tasks);
    for (source, task) in cfg.data.iter().zip(&merged.tasks) {
        let all = DataSource::parse(source)?.load(&cfg.synth, Some(task.input_shape), Split::Train)?;
        let held = (all.len() as f64 * cfg.validation_fraction).round() as usize;
        let (train, validation) = if held == 0 {
            (all.clone(), all)
        } else {
            all.split_tail(held)
        };
        task_data.push(TaskData { train, validation });
    }

    let outcome = calibrate(&merged, &task_data, &refs, &cfg.calibration)?;
    let config = persist(&args.out, &cfg)?;
    let mut tuned = outcome.model.clone();
    tuned.provenance = Some(provenance(
        "finetune",
        config,
        json!({
            "originals": path_strings(&cfg.originals),
            "best_epoch": outcome.best_epoch,
            "source": merged.provenance,
        }),
    ));
    save_merged(&tuned, &args.out)?;
    let log = args.out.with_extension("log.csv");
    outcome.write_csv(&log)?;

    for e in &outcome.log {
        let accs: Vec<String> = e.task_accuracy.iter().map(|a| percent(*a)).collect();
        println!("epoch {:>3}: validation accuracy {}", e.epoch, accs.join(" "));
    }
    println!("kept epoch {}", outcome.best_epoch);
    println!("wrote {} and {}", args.out.display(), log.display());
    Ok(())
}

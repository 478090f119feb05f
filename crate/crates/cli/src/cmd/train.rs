use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use neuralmerger::etrain::{train_baseline, SgdConfig};
use neuralmerger::netdef::{save_model, Arch, Split};
use neuralmerger::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{persist, resolve};
use crate::data::{parse_shape, DataSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ArchName {
    Lenet,
    Small,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: ArchName,
    /// Widths of the small architecture; LeNet ignores them.
    pub conv: (usize, usize),
    pub hidden: usize,
    pub kernel: usize,
    pub name: Option<String>,
    pub data: String,
    /// Defaults to the test split of a synthetic training set.
    pub test_data: Option<String>,
    pub sgd: SgdConfig,
    pub synth: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchName::Small,
            conv: (8, 16),
            hidden: 128,
            kernel: 3,
            name: None,
            data: "synthetic:bars".into(),
            test_data: None,
            sgd: SgdConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn arch(&self) -> Arch {
        match self.arch {
            ArchName::Lenet => Arch::LeNet,
            ArchName::Small => Arch::Small {
                conv: self.conv,
                hidden: self.hidden,
                kernel: self.kernel,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub arch: Option<ArchName>,
    #[arg(long, num_args = 2, value_names = ["P1", "P2"])]
    pub conv: Option<Vec<usize>>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    /// Model name; defaults to the output file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// `synthetic:<family>[:train|test]` or `idx:<images>,<labels>`.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub test_data: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seeds both initialisation and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Synthetic image shape as RxCxD.
    #[arg(long)]
    pub input: Option<String>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: TrainArgs) -> Result<()> {
    let shape = args.input.as_deref().map(parse_shape).transpose()?;
    let cfg: TrainConfig = resolve(
        args.config.as_deref(),
        json!({
            "arch": args.arch,
            "conv": args.conv,
            "hidden": args.hidden,
            "kernel": args.kernel,
            "name": args.name,
            "data": args.data,
            "test_data": args.test_data,
            "sgd": {
                "epochs": args.epochs,
                "learning_rate": args.lr,
                "momentum": args.momentum,
                "batch_size": args.batch_size,
                "seed": args.seed,
            },
            "synth": {
                "shape": shape,
                "train": args.train_size,
                "test": args.test_size,
                "noise": args.noise,
                "seed": args.data_seed,
            },
        }),
    )?;

    let source = DataSource::parse(&cfg.data)?;
    let train = source.load(&cfg.synth, None, Split::Train)?;
    let test_source = match &cfg.test_data {
        Some(s) => Some(DataSource::parse(s)?),
        None => source.test_counterpart(),
    };
    let test = test_source
        .map(|s| s.load(&cfg.synth, None, Split::Test))
        .transpose()?;
    let input = train.image_shape().context("training set is empty")?;
    let name = cfg.name.clone().unwrap_or_else(|| stem(&args.out));
    let model = cfg.arch().build(&name, input, train.classes, cfg.sgd.seed)?;

    let report = train_baseline(model, &train, test.as_ref(), &cfg.sgd)?;
    let mut model = report.model;
    let config = persist(&args.out, &cfg)?;
    model.provenance = Some(crate::cmd::provenance(
        "train-baseline",
        config,
        json!({ "test_accuracy": report.test_accuracy }),
    ));
    save_model(&model, &args.out)?;

    let log = args.out.with_extension("log.csv");
    let mut w = csv::Writer::from_path(&log).with_context(|| format!("writing {}", log.display()))?;
    for record in &report.epochs {
        w.serialize(record)?;
    }
    w.flush()?;

    let last = report.epochs.last();
    println!(
        "trained `{name}` on {} samples: final loss {:.4}, train accuracy {}, test accuracy {}",
        train.len(),
        last.map_or(f64::NAN, |e| e.loss),
        last.map_or("n/a".into(), |e| crate::cmd::percent(e.train_accuracy)),
        report.test_accuracy.map_or("n/a".into(), crate::cmd::percent),
    );
    println!("wrote {} and {}", args.out.display(), log.display());
    Ok(())
}

pub fn stem(path: &std::path::Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

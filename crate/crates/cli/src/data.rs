use anyhow::{bail, Context, Result};
use neuralmerger::netdef::{load_idx_dataset, Dataset, Split};
use neuralmerger::synth::{generate, Family, SynthConfig};
use neuralmerger::Shape3;

/// A parsed `--data` argument.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { family: Family, split: Option<Split> },
    Idx { images: String, labels: String },
}

impl DataSource {
    pub fn parse(source: &str) -> Result<Self> {
        if let Some(rest) = source.strip_prefix("synthetic:") {
            let mut parts = rest.split(':');
            let family: Family = parts.next().unwrap_or_default().parse()?;
            let split = match parts.next() {
                None => None,
                Some("train") => Some(Split::Train),
                Some("test") => Some(Split::Test),
                Some(other) => bail!("unknown split `{other}` in `{source}` (train or test)"),
            };
            if parts.next().is_some() {
                bail!("too many fields in `{source}`");
            }
            return Ok(DataSource::Synthetic { family, split });
        }
        if let Some(rest) = source.strip_prefix("idx:") {
            let Some((images, labels)) = rest.split_once(',') else {
                bail!("expected idx:<images>,<labels>, got `{source}`");
            };
            return Ok(DataSource::Idx {
                images: images.to_string(),
                labels: labels.to_string(),
            });
        }
        bail!("unrecognised data source `{source}` (synthetic:<family>[:train|test] or idx:<images>,<labels>)")
    }

    /// The matching held-out split, when one can be derived.
    pub fn test_counterpart(&self) -> Option<DataSource> {
        match self {
            DataSource::Synthetic { family, .. } => Some(DataSource::Synthetic {
                family: *family,
                split: Some(Split::Test),
            }),
            DataSource::Idx { .. } => None,
        }
    }

    /// Loads the data. `shape` overrides the synthetic image shape.
    pub fn load(&self, synth: &SynthConfig, shape: Option<Shape3>, default_split: Split) -> Result<Dataset> {
        match self {
            DataSource::Synthetic { family, split } => {
                let cfg = SynthConfig {
                    shape: shape.unwrap_or(synth.shape),
                    ..synth.clone()
                };
                Ok(generate(*family, split.unwrap_or(default_split), &cfg)?)
            }
            DataSource::Idx { images, labels } => load_idx_dataset(images, labels, default_split)
                .with_context(|| format!("reading {images} and {labels}")),
        }
    }
}

/// Parses `RxCxD`.
pub fn parse_shape(s: &str) -> Result<Shape3> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad shape `{s}`, expected RxCxD"))?;
    match dims[..] {
        [rows, cols, depth] => Ok(Shape3::new(rows, cols, depth)),
        _ => bail!("bad shape `{s}`, expected RxCxD"),
    }
}

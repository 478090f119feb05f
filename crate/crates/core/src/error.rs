use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer {layer}: {message}")]
    LayerShape { layer: usize, message: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("codeword index {index} out of range for codebook of {count} words")]
    CodewordRange { index: usize, count: usize },

    #[error("invalid alignment plan: {0}")]
    Plan(String),

    #[error("k-means: {0}")]
    KMeans(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("model format: {0}")]
    Format(#[from] FormatError),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures while reading or writing `.nmj` / `.nmb` files.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch in `{section}`")]
    Checksum { section: String },

    #[error("blob truncated: section `{section}` needs bytes {start}..{end}, blob has {len}")]
    Truncated {
        section: String,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("structure: {0}")]
    Structure(String),

    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}

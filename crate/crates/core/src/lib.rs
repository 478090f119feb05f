//! Merge several trained feed-forward CNNs into one model whose Conv and FC
//! weights are shared through per-segment codebooks, run it with
//! lookup-table convolution, and recover accuracy by fine-tuning the
//! codebooks end to end.

pub mod align;
pub mod bench;
pub mod einfer;
pub mod error;
pub mod etrain;
pub mod format;
pub mod netdef;
pub mod quantize;
pub mod synth;
pub mod tensor;

#[cfg(test)]
mod testkit;

pub use error::{Error, FormatError, Result};
pub use tensor::{KernelSet, Shape3, Tensor3};

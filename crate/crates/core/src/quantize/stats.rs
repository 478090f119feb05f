use serde::{Deserialize, Serialize};

use super::merged::{MergedModel, TaskLayer};
use crate::format::ElemType;
use crate::netdef::{LayerKind, Model};

/// Bytes per stored real in the size accounting (single precision, as
/// deployed models are counted).
pub const BYTES_PER_PARAM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCompression {
    pub name: String,
    pub kind: LayerKind,
    pub r: usize,
    /// Configured codeword count (`usize::MAX` in lossless mode).
    pub c: usize,
    pub segments: usize,
    pub shared_segments: usize,
    /// Dense weight bytes of every member layer (biases excluded).
    pub original_bytes: usize,
    pub codebook_bytes: usize,
    pub index_bytes: usize,
    pub merged_bytes: usize,
    pub ratio: f64,
    /// `sum C / sum C_AB` over shared segments; `None` for private layers.
    pub coefficient_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeTotals {
    pub original_bytes: usize,
    pub merged_bytes: usize,
    pub ratio: f64,
}

impl SizeTotals {
    fn new(original_bytes: usize, merged_bytes: usize) -> Self {
        Self {
            original_bytes,
            merged_bytes,
            ratio: original_bytes as f64 / merged_bytes.max(1) as f64,
        }
    }
}

/// Storage accounting of a merged model against its source models.
///
/// Two conventions are reported: `coefficients` counts only the weights of
/// quantized layers against their codebooks and packed indices; `whole_model`
/// counts every stored number, including biases and the unquantized
/// classifier layers. Indices take one byte when a codebook has at most 256
/// codewords and two otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub layers: Vec<LayerCompression>,
    pub coefficients: SizeTotals,
    pub whole_model: SizeTotals,
}

pub fn compression_stats(models: &[&Model], merged: &MergedModel) -> CompressionReport {
    let mut layers = Vec::new();
    let mut coeff_orig = 0;
    let mut coeff_merged = 0;
    let mut bias_bytes = 0;
    for layer in &merged.elayers {
        let original_bytes: usize = layer
            .members
            .iter()
            .map(|m| m.geometry.weight_count() * BYTES_PER_PARAM)
            .sum();
        let codebook_bytes: usize = layer
            .codebooks
            .iter()
            .map(|b| b.words.len() * BYTES_PER_PARAM)
            .sum();
        let index_bytes: usize = layer
            .members
            .iter()
            .map(|m| {
                let per_vector = m.geometry.vectors_per_segment();
                m.books
                    .iter()
                    .map(|&b| per_vector * ElemType::for_codebook(layer.codebooks[b].count()).width())
                    .sum::<usize>()
            })
            .sum();
        bias_bytes += layer
            .members
            .iter()
            .map(|m| m.bias.len() * BYTES_PER_PARAM)
            .sum::<usize>();
        let shared: Vec<_> = layer.codebooks.iter().filter(|b| b.is_shared()).collect();
        let coefficient_ratio = (!shared.is_empty()).then(|| {
            let c: usize = shared.iter().map(|b| b.count()).sum();
            let c_ab: usize = shared.iter().map(|b| b.vectors).sum();
            c as f64 / c_ab as f64
        });
        let merged_bytes = codebook_bytes + index_bytes;
        coeff_orig += original_bytes;
        coeff_merged += merged_bytes;
        layers.push(LayerCompression {
            name: layer.name.clone(),
            kind: layer.kind,
            r: layer.params.r,
            c: layer.params.c,
            segments: layer.codebooks.len(),
            shared_segments: shared.len(),
            original_bytes,
            codebook_bytes,
            index_bytes,
            merged_bytes,
            ratio: original_bytes as f64 / merged_bytes.max(1) as f64,
            coefficient_ratio,
        });
    }
    let plain_bytes: usize = merged
        .tasks
        .iter()
        .flat_map(|t| &t.layers)
        .map(|l| match l {
            TaskLayer::Plain(layer) => layer.param_count() * BYTES_PER_PARAM,
            TaskLayer::Quantized { .. } => 0,
        })
        .sum();
    let whole_orig: usize = models.iter().map(|m| m.param_count() * BYTES_PER_PARAM).sum();
    CompressionReport {
        layers,
        coefficients: SizeTotals::new(coeff_orig, coeff_merged),
        whole_model: SizeTotals::new(whole_orig, coeff_merged + bias_bytes + plain_bytes),
    }
}

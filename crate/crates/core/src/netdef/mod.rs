//! Sequential network descriptions, the dense reference forward pass,
//! persistence and dataset ingestion.

mod arch;
mod idx;
pub(crate) mod io;

pub use arch::{he_init, Arch};
pub use idx::{load_idx_dataset, write_idx_images, write_idx_labels, Dataset, Split};
pub use io::{load_model, save_model};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_unrolled, KernelSet, Shape3, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: KernelSet,
    pub bias: Vec<f64>,
}

/// `y = W x + b` with `W` stored row-major as `n_out x n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FcLayer {
    pub fn new(n_in: usize, n_out: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != n_in * n_out || bias.len() != n_out {
            return Err(Error::Shape(format!(
                "fc {n_in}->{n_out} needs {} weights and {n_out} biases, got {} and {}",
                n_in * n_out,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            n_in,
            n_out,
            weights,
            bias,
        })
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.n_in..(o + 1) * self.n_in]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| {
                self.bias[o]
                    + self
                        .row(o)
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Fc(FcLayer),
    MaxPool { window: usize, stride: usize },
    Relu,
    Flatten,
    Softmax,
}

/// Coarse layer type, used by alignment and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
    MaxPool,
    Relu,
    Flatten,
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Fc(_) => LayerKind::Fc,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::Relu => LayerKind::Relu,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Softmax => LayerKind::Softmax,
        }
    }

    /// Weight and bias parameter count.
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.kernels.data().len() + c.bias.len(),
            Layer::Fc(f) => f.weights.len() + f.bias.len(),
            _ => 0,
        }
    }

    /// Output shape for a given input shape, or a description of the mismatch.
    pub fn output_shape(&self, input: Shape3) -> std::result::Result<Shape3, String> {
        match self {
            Layer::Conv(c) => {
                if input.depth != c.kernels.depth() {
                    return Err(format!(
                        "conv expects depth {}, input is {input}",
                        c.kernels.depth()
                    ));
                }
                Ok(Shape3::new(input.rows, input.cols, c.kernels.count()))
            }
            Layer::Fc(f) => {
                if input.rows != 1 || input.cols != 1 || input.depth != f.n_in {
                    return Err(format!("fc expects a flat 1x1x{} input, got {input}", f.n_in));
                }
                Ok(Shape3::new(1, 1, f.n_out))
            }
            Layer::MaxPool { window, stride } => {
                if *window == 0 || *stride == 0 {
                    return Err("max-pool window and stride must be positive".into());
                }
                if input.rows < *window || input.cols < *window {
                    return Err(format!("max-pool window {window} larger than input {input}"));
                }
                Ok(Shape3::new(
                    (input.rows - window) / stride + 1,
                    (input.cols - window) / stride + 1,
                    input.depth,
                ))
            }
            Layer::Relu | Layer::Softmax => Ok(input),
            Layer::Flatten => Ok(Shape3::new(1, 1, input.len())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub input_shape: Shape3,
    /// Number of classes of the task (`gamma`).
    pub classes: usize,
    pub layers: Vec<Layer>,
    /// Free-form record of the configuration that produced the model.
    pub provenance: Option<serde_json::Value>,
}

impl Model {
    /// Checks shape compatibility and the sequential-CNN structure; returns
    /// the output shape of every layer.
    pub fn validate(&self) -> Result<Vec<Shape3>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut shape = self.input_shape;
        for (idx, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(shape)
                .map_err(|message| Error::LayerShape { layer: idx, message })?;
            shapes.push(shape);
        }
        let softmax: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Softmax))
            .map(|(i, _)| i)
            .collect();
        if softmax != [self.layers.len().saturating_sub(1)] {
            return Err(Error::Shape(format!(
                "model `{}` must end in exactly one softmax layer",
                self.name
            )));
        }
        if !self.layers.iter().any(|l| matches!(l, Layer::Conv(_))) {
            return Err(Error::Shape(format!("model `{}` has no conv layer", self.name)));
        }
        if !self.layers.iter().any(|l| matches!(l, Layer::Fc(_))) {
            return Err(Error::Shape(format!("model `{}` has no fc layer", self.name)));
        }
        if shape.len() != self.classes {
            return Err(Error::Shape(format!(
                "model `{}` outputs {} values for {} classes",
                self.name,
                shape.len(),
                self.classes
            )));
        }
        Ok(shapes)
    }

    pub fn conv_indices(&self) -> Vec<usize> {
        self.indices_of(LayerKind::Conv)
    }

    pub fn fc_indices(&self) -> Vec<usize> {
        self.indices_of(LayerKind::Fc)
    }

    fn indices_of(&self, kind: LayerKind) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind() == kind)
            .map(|(i, _)| i)
            .collect()
    }

    /// Index of the final (classifier) FC layer.
    pub fn classifier_index(&self) -> Option<usize> {
        self.fc_indices().last().copied()
    }

    /// Layer index whose output is the tap of the Conv/FC layer at `idx`:
    /// the following ReLU when there is one, otherwise the layer itself.
    pub fn tap_source(&self, idx: usize) -> usize {
        match self.layers.get(idx + 1) {
            Some(Layer::Relu) => idx + 1,
            _ => idx,
        }
    }

    /// Layer indices whose outputs are taps, one per Conv/FC layer in order.
    pub fn tap_points(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv(_) | Layer::Fc(_)))
            .map(|(i, _)| self.tap_source(i))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }
}

/// Logits and post-activation outputs of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Input of the final softmax.
    pub logits: Vec<f64>,
    /// One entry per Conv and FC layer, in layer order.
    pub taps: Vec<Tensor3>,
}

impl Forward {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn max_pool(x: &Tensor3, window: usize, stride: usize) -> Tensor3 {
    let out_r = (x.n_rows() - window) / stride + 1;
    let out_c = (x.n_cols() - window) / stride + 1;
    let d = x.depth();
    let mut y = Tensor3::zeros(out_r, out_c, d);
    for i in 0..out_r {
        for j in 0..out_c {
            for u in 0..d {
                let mut m = f64::NEG_INFINITY;
                for a in 0..window {
                    for b in 0..window {
                        m = m.max(x.get(i * stride + a, j * stride + b, u));
                    }
                }
                y.set(i, j, u, m);
            }
        }
    }
    y
}

pub(crate) fn relu(mut x: Tensor3) -> Tensor3 {
    for v in x.data_mut() {
        *v = v.max(0.0);
    }
    x
}

/// Forward through one non-softmax layer. Softmax is the identity here; the
/// caller reads logits from its input.
pub(crate) fn apply_layer(layer: &Layer, x: Tensor3) -> Result<Tensor3> {
    Ok(match layer {
        Layer::Conv(c) => conv_unrolled(&x, &c.kernels, &c.bias)?,
        Layer::Fc(f) => Tensor3::vector(f.apply(x.data())),
        Layer::MaxPool { window, stride } => max_pool(&x, *window, *stride),
        Layer::Relu => relu(x),
        Layer::Flatten => {
            let n = x.shape().len();
            x.reshaped(1, 1, n)?
        }
        Layer::Softmax => x,
    })
}

/// Dense forward pass retaining every Conv/FC tap.
pub fn forward_reference(model: &Model, x: &Tensor3) -> Result<Forward> {
    if x.shape() != model.input_shape {
        return Err(Error::LayerShape {
            layer: 0,
            message: format!("input is {}, model expects {}", x.shape(), model.input_shape),
        });
    }
    let tap_points = model.tap_points();
    let mut cur = x.clone();
    let mut taps = Vec::with_capacity(tap_points.len());
    for (idx, layer) in model.layers.iter().enumerate() {
        if let Err(message) = layer.output_shape(cur.shape()) {
            return Err(Error::LayerShape { layer: idx, message });
        }
        if matches!(layer, Layer::Softmax) {
            return Ok(Forward {
                logits: cur.into_data(),
                taps,
            });
        }
        cur = apply_layer(layer, cur)?;
        if tap_points.contains(&idx) {
            taps.push(cur.clone());
        }
    }
    Err(Error::Shape(format!("model `{}` has no softmax layer", model.name)))
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ConvLayer, FcLayer, Layer, Model};
use crate::error::{Error, Result};
use crate::tensor::{KernelSet, Shape3};

/// Built-in architectures.
///
/// Both are `conv - relu - pool2 - conv - relu - pool2 - flatten - fc - relu - fc - softmax`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// 32 and 64 kernels of 5x5, then 1024 hidden units.
    LeNet,
    /// Same topology with configurable widths and odd kernel size.
    Small {
        conv: (usize, usize),
        hidden: usize,
        kernel: usize,
    },
}

impl Arch {
    fn dims(&self) -> ((usize, usize), usize, usize) {
        match *self {
            Arch::LeNet => ((32, 64), 1024, 5),
            Arch::Small { conv, hidden, kernel } => (conv, hidden, kernel),
        }
    }

    /// Builds a He-initialised model with zero biases.
    pub fn build(&self, name: &str, input: Shape3, classes: usize, seed: u64) -> Result<Model> {
        let ((p1, p2), hidden, k) = self.dims();
        if k % 2 == 0 {
            return Err(Error::Unsupported(format!("kernel size {k} must be odd")));
        }
        if input.rows < 4 || input.cols < 4 {
            return Err(Error::Shape(format!("input {input} too small for two 2x2 pools")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = (input.rows / 2 / 2) * (input.cols / 2 / 2) * p2;
        let conv = |rng: &mut ChaCha8Rng, p: usize, d: usize| -> Result<Layer> {
            let fan_in = k * k * d;
            Ok(Layer::Conv(ConvLayer {
                kernels: KernelSet::new(p, k, k, d, he_init(rng, p * fan_in, fan_in))?,
                bias: vec![0.0; p],
            }))
        };
        let fc = |rng: &mut ChaCha8Rng, n_in: usize, n_out: usize| -> Result<Layer> {
            Ok(Layer::Fc(FcLayer::new(
                n_in,
                n_out,
                he_init(rng, n_in * n_out, n_in),
                vec![0.0; n_out],
            )?))
        };
        let layers = vec![
            conv(&mut rng, p1, input.depth)?,
            Layer::Relu,
            Layer::MaxPool { window: 2, stride: 2 },
            conv(&mut rng, p2, p1)?,
            Layer::Relu,
            Layer::MaxPool { window: 2, stride: 2 },
            Layer::Flatten,
            fc(&mut rng, flat, hidden)?,
            Layer::Relu,
            fc(&mut rng, hidden, classes)?,
            Layer::Softmax,
        ];
        let model = Model {
            name: name.to_string(),
            input_shape: input,
            classes,
            layers,
            provenance: None,
        };
        model.validate()?;
        Ok(model)
    }
}

/// `count` draws from `N(0, 2 / fan_in)`.
pub fn he_init(rng: &mut ChaCha8Rng, count: usize, fan_in: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..count).map(|_| normal.sample(rng)).collect()
}

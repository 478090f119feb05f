use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backprop::{backward_tape, cross_entropy, forward_tape, LayerGrad};
use crate::error::{Error, Result};
use crate::netdef::{argmax, forward_reference, Dataset, Layer, Model};

/// Samples per parallel work unit. Fixed so the reduction order, and hence
/// the result, does not depend on the thread count.
pub(crate) const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub model: Model,
    pub epochs: Vec<EpochRecord>,
    pub test_accuracy: Option<f64>,
}

/// Shuffled mini-batches of sample indices for one epoch.
pub(crate) fn batches(len: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Summed loss, correct count and summed layer gradients over `indices`.
fn batch_gradients(layers: &[Layer], data: &Dataset, indices: &[usize]) -> Result<(f64, usize, Vec<LayerGrad>)> {
    let parts = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads: Vec<LayerGrad> = layers.iter().map(LayerGrad::zeros_for).collect();
            let mut loss = 0.0;
            let mut correct = 0;
            for &i in chunk {
                let tape = forward_tape(layers, &data.images[i])?;
                let (l, dlogits) = cross_entropy(tape.logits(), data.labels[i]);
                loss += l;
                correct += usize::from(argmax(tape.logits()) == data.labels[i]);
                let (g, _) = backward_tape(layers, &tape, &dlogits, &[], false);
                for (acc, g) in grads.iter_mut().zip(&g) {
                    acc.add(g);
                }
            }
            Ok((loss, correct, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut parts = parts.into_iter();
    let first = parts.next().expect("non-empty batch");
    Ok(parts.fold(first, |(l, c, mut g), (l2, c2, g2)| {
        for (a, b) in g.iter_mut().zip(&g2) {
            a.add(b);
        }
        (l + l2, c + c2, g)
    }))
}

/// Momentum SGD update `v = mu v + g; w -= lr v` on one buffer.
pub(crate) fn sgd_step(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, mu: f64, scale: f64) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + g * scale;
        *w -= lr * *v;
    }
}

fn params_mut(layer: &mut Layer) -> Option<(&mut [f64], &mut [f64])> {
    match layer {
        Layer::Conv(c) => Some((c.kernels.data_mut(), &mut c.bias)),
        Layer::Fc(f) => Some((&mut f.weights, &mut f.bias)),
        _ => None,
    }
}

/// Fraction of `data` a dense model classifies correctly.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let correct = data
        .images
        .par_iter()
        .zip(&data.labels)
        .map(|(x, &y)| Ok(usize::from(forward_reference(model, x)?.predicted() == y)))
        .collect::<Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len().max(1) as f64)
}

/// Trains `model` with mini-batch momentum SGD on cross-entropy.
pub fn train_baseline(mut model: Model, train: &Dataset, test: Option<&Dataset>, cfg: &SgdConfig) -> Result<TrainReport> {
    cfg.validate()?;
    model.validate()?;
    check_data(&model, train)?;
    if let Some(t) = test {
        check_data(&model, t)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<LayerGrad> = model.layers.iter().map(LayerGrad::zeros_for).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in batches(train.len(), cfg.batch_size, &mut rng) {
            let (loss, c, grads) = batch_gradients(&model.layers, train, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            loss_sum += loss;
            correct += c;
            let scale = 1.0 / batch.len() as f64;
            for ((layer, g), v) in model.layers.iter_mut().zip(&grads).zip(&mut velocity) {
                if let (Some((w, b)), LayerGrad::Weighted { weights, bias }, LayerGrad::Weighted { weights: vw, bias: vb }) =
                    (params_mut(layer), g, v)
                {
                    sgd_step(w, weights, vw, cfg.learning_rate, cfg.momentum, scale);
                    sgd_step(b, bias, vb, cfg.learning_rate, cfg.momentum, scale);
                }
            }
        }
        let finite = model.layers.iter_mut().filter_map(params_mut).all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Divergence { epoch, loss: f64::NAN });
        }
        let n = train.len().max(1) as f64;
        epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
        });
    }
    let test_accuracy = test.map(|t| accuracy(&model, t)).transpose()?;
    Ok(TrainReport {
        model,
        epochs,
        test_accuracy,
    })
}

pub(crate) fn check_data(model: &Model, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    if let Some(s) = data.image_shape() {
        if s != model.input_shape {
            return Err(Error::Dataset(format!("images are {s}, model `{}` expects {}", model.name, model.input_shape)));
        }
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= model.classes) {
        return Err(Error::Dataset(format!("label {bad} out of range for {} classes", model.classes)));
    }
    Ok(())
}

/// Input for tests: a separable 2-class set of 6x6x1 images.
#[cfg(test)]
pub(crate) fn separable(count: usize, seed: u64) -> Dataset {
    use crate::tensor::Tensor3;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for k in 0..count {
        let label = k % 2;
        let mut x = Tensor3::zeros(6, 6, 1);
        for i in 0..6 {
            for j in 0..6 {
                let bright = if label == 0 { j < 3 } else { j >= 3 };
                let base = if bright { 0.8 } else { 0.1 };
                x.set(i, j, 0, base + rng.random_range(-0.1..0.1));
            }
        }
        images.push(x);
        labels.push(label);
    }
    Dataset::new(images, labels, crate::netdef::Split::Train, 2).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::Arch;
    use crate::Shape3;

    fn tiny_cnn() -> Model {
        Arch::Small { conv: (2, 4), hidden: 8, kernel: 3 }
            .build("t", Shape3::new(6, 6, 1), 2, 3)
            .unwrap()
    }

    #[test]
    fn separable_set_is_learned() {
        let data = separable(64, 1);
        let cfg = SgdConfig {
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 8,
            ..SgdConfig::default()
        };
        let report = train_baseline(tiny_cnn(), &data, Some(&data), &cfg).unwrap();
        assert!(report.test_accuracy.unwrap() >= 0.99, "{:?}", report.epochs.last());
        assert_eq!(report.epochs.len(), 20);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = separable(16, 2);
        let cfg = SgdConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..SgdConfig::default()
        };
        let model = tiny_cnn();
        let report = train_baseline(model.clone(), &data, None, &cfg).unwrap();
        assert_eq!(report.model, model);
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable(32, 3);
        let cfg = SgdConfig {
            epochs: 2,
            batch_size: 5,
            ..SgdConfig::default()
        };
        let a = train_baseline(tiny_cnn(), &data, None, &cfg).unwrap();
        let b = train_baseline(tiny_cnn(), &data, None, &cfg).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn divergence_reports_the_epoch() {
        let data = separable(16, 4);
        let cfg = SgdConfig {
            learning_rate: 1e300,
            momentum: 0.0,
            epochs: 5,
            batch_size: 4,
            ..SgdConfig::default()
        };
        match train_baseline(tiny_cnn(), &data, None, &cfg) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.epochs)),
        }
    }

    #[test]
    fn bad_config_and_data_are_rejected() {
        let data = separable(4, 5);
        let bad = SgdConfig {
            batch_size: 0,
            ..SgdConfig::default()
        };
        assert!(matches!(train_baseline(tiny_cnn(), &data, None, &bad), Err(Error::Config(_))));
        let mut wrong = data.clone();
        wrong.labels[0] = 7;
        assert!(matches!(
            train_baseline(tiny_cnn(), &wrong, None, &SgdConfig::default()),
            Err(Error::Dataset(_))
        ));
    }
}

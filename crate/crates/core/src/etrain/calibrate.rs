use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backprop::{backward_tape, cross_entropy, forward_tape, LayerGrad};
use super::baseline::{batches, check_data, sgd_step, CHUNK};
use super::egrad::scatter_weight_grad;
use super::egrad::CodebookGrad;
use crate::einfer::merged_accuracy;
use crate::error::{Error, Result};
use crate::netdef::{argmax, Dataset, Layer, Model};
use crate::quantize::{MergedModel, TaskLayer};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    /// Weight of the layer-wise L1 output mismatch term.
    pub lambda_mismatch: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of each task's training set used for calibration.
    pub data_fraction: f64,
    pub seed: u64,
    /// Keep biases and unquantized layers fixed; only codebooks move.
    pub freeze_unquantized: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            lambda_mismatch: 1.0,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 5,
            batch_size: 32,
            data_fraction: 1.0,
            seed: 0,
            freeze_unquantized: false,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!("data fraction {} outside (0, 1]", self.data_fraction)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.lambda_mismatch >= 0.0 && self.lambda_mismatch.is_finite()) {
            return Err(Error::Config(format!("mismatch weight {} must be non-negative", self.lambda_mismatch)));
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

/// Gradients of every real-valued parameter of a merged model.
/// Weight and bias buffers of one dense layer.
pub type WeightBias = (Vec<f64>, Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// `[elayer][codebook]`, shaped like the codebook's `words`.
    pub codebooks: Vec<Vec<Vec<f64>>>,
    /// `[elayer][member]`.
    pub biases: Vec<Vec<Vec<f64>>>,
    /// `[task][layer]` weight and bias gradients of unquantized Conv/FC layers.
    pub plain: Vec<Vec<Option<WeightBias>>>,
}

impl GradientBundle {
    pub fn zeros(mm: &MergedModel) -> Self {
        Self {
            codebooks: mm
                .elayers
                .iter()
                .map(|l| l.codebooks.iter().map(|b| vec![0.0; b.words.len()]).collect())
                .collect(),
            biases: mm
                .elayers
                .iter()
                .map(|l| l.members.iter().map(|m| vec![0.0; m.bias.len()]).collect())
                .collect(),
            plain: mm
                .tasks
                .iter()
                .map(|t| {
                    t.layers
                        .iter()
                        .map(|l| match l {
                            TaskLayer::Plain(Layer::Conv(c)) => Some((vec![0.0; c.kernels.data().len()], vec![0.0; c.bias.len()])),
                            TaskLayer::Plain(Layer::Fc(f)) => Some((vec![0.0; f.weights.len()], vec![0.0; f.bias.len()])),
                            _ => None,
                        })
                        .collect()
                })
                .collect(),
        }
    }

    fn buffers(&self) -> impl Iterator<Item = &Vec<f64>> {
        let books = self.codebooks.iter().flatten();
        let biases = self.biases.iter().flatten();
        let plain = self.plain.iter().flatten().flatten().flat_map(|(w, b)| [w, b]);
        books.chain(biases).chain(plain)
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.buffers().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-task share of a calibration loss (means over the task's samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub task: usize,
    pub cross_entropy: f64,
    /// Unweighted sum over quantized layers of the mean L1 tap mismatch.
    pub mismatch: f64,
    pub samples: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationLoss {
    /// Sum over tasks of `cross_entropy + lambda * mismatch`.
    pub total: f64,
    pub tasks: Vec<TaskLoss>,
}

/// One task's mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct TaskBatch<'a> {
    pub task: usize,
    pub images: &'a [Tensor3],
    pub labels: &'a [usize],
}

struct TaskSetup {
    dense: Model,
    /// `(layer index, tap layer index)` per quantized layer.
    taps: Vec<(usize, usize)>,
}

fn setup(mm: &MergedModel, task: usize, original: &Model) -> Result<TaskSetup> {
    let dense = mm.dequantized_model(task)?;
    if original.layers.len() != dense.layers.len() || original.input_shape != dense.input_shape {
        return Err(Error::Shape(format!(
            "original model `{}` does not match task `{}`",
            original.name, dense.name
        )));
    }
    let taps = mm
        .quantized_layers(task)
        .into_iter()
        .map(|(idx, _, _)| (idx, dense.tap_source(idx)))
        .collect();
    Ok(TaskSetup { dense, taps })
}

/// Loss and gradient of one sample-chunk: summed CE, summed mismatch,
/// correct count and summed dense layer gradients.
fn chunk_gradients(
    s: &TaskSetup,
    original: &Model,
    images: &[Tensor3],
    labels: &[usize],
    lambda: f64,
) -> Result<(f64, f64, usize, Vec<LayerGrad>)> {
    let layers = &s.dense.layers;
    let mut grads: Vec<LayerGrad> = layers.iter().map(LayerGrad::zeros_for).collect();
    let (mut ce, mut mismatch, mut correct) = (0.0, 0.0, 0);
    let mut extra: Vec<Option<Tensor3>> = vec![None; layers.len()];
    for (x, &label) in images.iter().zip(labels) {
        let tape = forward_tape(layers, x)?;
        let reference = forward_tape(&original.layers, x)?;
        let (l, dlogits) = cross_entropy(tape.logits(), label);
        ce += l;
        correct += usize::from(argmax(tape.logits()) == label);
        extra.iter_mut().for_each(|e| *e = None);
        for &(_, tap) in &s.taps {
            let (merged, target) = (tape.output(tap), reference.output(tap));
            if merged.shape() != target.shape() {
                return Err(Error::Shape(format!(
                    "tap {tap}: merged output {} differs from original {}",
                    merged.shape(),
                    target.shape()
                )));
            }
            let n = merged.data().len() as f64;
            let mut g = Tensor3::zeros(merged.n_rows(), merged.n_cols(), merged.depth());
            for ((d, &a), &b) in g.data_mut().iter_mut().zip(merged.data()).zip(target.data()) {
                let diff = a - b;
                mismatch += diff.abs() / n;
                *d = if diff > 0.0 {
                    lambda / n
                } else if diff < 0.0 {
                    -lambda / n
                } else {
                    0.0
                };
            }
            extra[tap] = Some(g);
        }
        let (g, _) = backward_tape(layers, &tape, &dlogits, &extra, false);
        for (acc, g) in grads.iter_mut().zip(&g) {
            acc.add(g);
        }
    }
    Ok((ce, mismatch, correct, grads))
}

/// Calibration loss over a set of task batches and its gradient with
/// respect to every codebook, bias and unquantized parameter. Each task's
/// contribution is a mean over its batch.
pub fn calibration_loss(
    mm: &MergedModel,
    batches: &[TaskBatch<'_>],
    originals: &[&Model],
    cfg: &CalibrationConfig,
) -> Result<(CalibrationLoss, GradientBundle)> {
    let mut bundle = GradientBundle::zeros(mm);
    let mut report = CalibrationLoss {
        total: 0.0,
        tasks: Vec::new(),
    };
    for batch in batches {
        let original = originals
            .get(batch.task)
            .ok_or_else(|| Error::UnknownTask(format!("no original model for task {}", batch.task)))?;
        if batch.task >= mm.tasks.len() {
            return Err(Error::UnknownTask(batch.task.to_string()));
        }
        if batch.images.is_empty() || batch.images.len() != batch.labels.len() {
            return Err(Error::Dataset("batch needs matching, non-empty images and labels".into()));
        }
        let s = setup(mm, batch.task, original)?;
        let parts = batch
            .images
            .par_chunks(CHUNK)
            .zip(batch.labels.par_chunks(CHUNK))
            .map(|(x, y)| chunk_gradients(&s, original, x, y, cfg.lambda_mismatch))
            .collect::<Result<Vec<_>>>()?;
        let mut grads: Vec<LayerGrad> = s.dense.layers.iter().map(LayerGrad::zeros_for).collect();
        let (mut ce, mut mismatch, mut correct) = (0.0, 0.0, 0);
        for (c, m, k, g) in parts {
            ce += c;
            mismatch += m;
            correct += k;
            for (a, b) in grads.iter_mut().zip(&g) {
                a.add(b);
            }
        }
        let n = batch.images.len() as f64;
        for g in &mut grads {
            if let LayerGrad::Weighted { weights, bias } = g {
                weights.iter_mut().chain(bias.iter_mut()).for_each(|v| *v /= n);
            }
        }
        accumulate(mm, batch.task, &grads, &mut bundle);
        let task_loss = TaskLoss {
            task: batch.task,
            cross_entropy: ce / n,
            mismatch: mismatch / n,
            samples: batch.images.len(),
            correct,
        };
        report.total += task_loss.cross_entropy + cfg.lambda_mismatch * task_loss.mismatch;
        report.tasks.push(task_loss);
    }
    Ok((report, bundle))
}

/// Routes dense per-layer gradients of `task` into the bundle.
fn accumulate(mm: &MergedModel, task: usize, grads: &[LayerGrad], bundle: &mut GradientBundle) {
    for (idx, (tl, g)) in mm.tasks[task].layers.iter().zip(grads).enumerate() {
        let LayerGrad::Weighted { weights, bias } = g else { continue };
        match tl {
            TaskLayer::Quantized { elayer, member } => {
                let layer = &mm.elayers[*elayer];
                let m = &layer.members[*member];
                let mut books: Vec<CodebookGrad> = m
                    .books
                    .iter()
                    .map(|&book| CodebookGrad {
                        book,
                        words: std::mem::take(&mut bundle.codebooks[*elayer][book]),
                    })
                    .collect();
                scatter_weight_grad(layer, m, weights, &mut books);
                for b in books {
                    bundle.codebooks[*elayer][b.book] = b.words;
                }
                super::backprop::add_into(&mut bundle.biases[*elayer][*member], bias);
            }
            TaskLayer::Plain(_) => {
                if let Some((w, b)) = &mut bundle.plain[task][idx] {
                    super::backprop::add_into(w, weights);
                    super::backprop::add_into(b, bias);
                }
            }
        }
    }
}

/// Momentum SGD state shaped like a [`GradientBundle`].
struct Optimizer {
    velocity: GradientBundle,
    lr: f64,
    momentum: f64,
    freeze: bool,
}

impl Optimizer {
    fn step(&mut self, mm: &mut MergedModel, g: &GradientBundle) {
        let (lr, mu) = (self.lr, self.momentum);
        for (li, layer) in mm.elayers.iter_mut().enumerate() {
            for (bi, book) in layer.codebooks.iter_mut().enumerate() {
                sgd_step(&mut book.words, &g.codebooks[li][bi], &mut self.velocity.codebooks[li][bi], lr, mu, 1.0);
            }
            if !self.freeze {
                for (mi, m) in layer.members.iter_mut().enumerate() {
                    sgd_step(&mut m.bias, &g.biases[li][mi], &mut self.velocity.biases[li][mi], lr, mu, 1.0);
                }
            }
        }
        if self.freeze {
            return;
        }
        for (ti, task) in mm.tasks.iter_mut().enumerate() {
            for (idx, tl) in task.layers.iter_mut().enumerate() {
                let (Some((gw, gb)), Some((vw, vb))) = (&g.plain[ti][idx], &mut self.velocity.plain[ti][idx]) else {
                    continue;
                };
                let (w, b): (&mut [f64], &mut [f64]) = match tl {
                    TaskLayer::Plain(Layer::Conv(c)) => (c.kernels.data_mut(), &mut c.bias),
                    TaskLayer::Plain(Layer::Fc(f)) => (&mut f.weights, &mut f.bias),
                    _ => continue,
                };
                sgd_step(w, gw, vw, lr, mu, 1.0);
                sgd_step(b, gb, vb, lr, mu, 1.0);
            }
        }
    }
}

/// Training and validation data of one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub validation: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEpoch {
    pub epoch: usize,
    /// Mean training cross-entropy per task; empty for the initial evaluation.
    pub task_loss: Vec<f64>,
    /// Validation accuracy per task.
    pub task_accuracy: Vec<f64>,
    /// Mean mismatch summed over tasks; `None` for the initial evaluation.
    pub mismatch: Option<f64>,
}

impl CalibrationEpoch {
    pub fn mean_accuracy(&self) -> f64 {
        self.task_accuracy.iter().sum::<f64>() / self.task_accuracy.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    /// State with the best mean validation accuracy (epoch 0 is the input).
    pub model: MergedModel,
    pub best_epoch: usize,
    pub log: Vec<CalibrationEpoch>,
}

impl CalibrationOutcome {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e: csv::Error| Error::io(path, e.into());
        let tasks = self.model.tasks.iter().map(|t| t.name.as_str()).collect::<Vec<_>>();
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        let header = std::iter::once("epoch".to_string())
            .chain(tasks.iter().map(|t| format!("loss_{t}")))
            .chain(tasks.iter().map(|t| format!("accuracy_{t}")))
            .chain(std::iter::once("mismatch".to_string()));
        w.write_record(header).map_err(io)?;
        let fmt = |v: Option<&f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for e in &self.log {
            let row = std::iter::once(e.epoch.to_string())
                .chain((0..tasks.len()).map(|k| fmt(e.task_loss.get(k))))
                .chain(e.task_accuracy.iter().map(|a| fmt(Some(a))))
                .chain(std::iter::once(fmt(e.mismatch.as_ref())));
            w.write_record(row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn validation_accuracy(mm: &MergedModel, data: &[TaskData]) -> Result<Vec<f64>> {
    (0..data.len())
        .map(|t| merged_accuracy(mm, t, &data[t].validation))
        .collect()
}

/// End-to-end fine-tuning of the merged model's codebooks (and, unless
/// frozen, its biases and classifiers) with task batches interleaved
/// round-robin.
pub fn calibrate(
    mm: &MergedModel,
    data: &[TaskData],
    originals: &[&Model],
    cfg: &CalibrationConfig,
) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    if data.len() != mm.tasks.len() || originals.len() != mm.tasks.len() {
        return Err(Error::Config(format!(
            "{} tasks need as many datasets and originals, got {} and {}",
            mm.tasks.len(),
            data.len(),
            originals.len()
        )));
    }
    let train: Vec<Dataset> = data
        .iter()
        .enumerate()
        .map(|(t, d)| {
            check_data(originals[t], &d.train)?;
            check_data(originals[t], &d.validation)?;
            d.train.fraction(cfg.data_fraction, crate::quantize::derive_seed(cfg.seed, &[t as u64]))
        })
        .collect::<Result<_>>()?;

    let mut current = mm.clone();
    let initial = CalibrationEpoch {
        epoch: 0,
        task_loss: Vec::new(),
        task_accuracy: validation_accuracy(&current, data)?,
        mismatch: None,
    };
    let mut best = (initial.mean_accuracy(), 0, current.clone());
    let mut log = vec![initial];
    let mut opt = Optimizer {
        velocity: GradientBundle::zeros(mm),
        lr: cfg.learning_rate,
        momentum: cfg.momentum,
        freeze: cfg.freeze_unquantized,
    };
    let mut rngs: Vec<ChaCha8Rng> = (0..train.len())
        .map(|t| ChaCha8Rng::seed_from_u64(crate::quantize::derive_seed(cfg.seed, &[1, t as u64])))
        .collect();
    for epoch in 1..=cfg.epochs {
        let orders: Vec<Vec<Vec<usize>>> = train
            .iter()
            .zip(&mut rngs)
            .map(|(d, rng)| batches(d.len(), cfg.batch_size, rng))
            .collect();
        let rounds = orders.iter().map(Vec::len).max().unwrap_or(0);
        let mut ce = vec![0.0; train.len()];
        let mut seen = vec![0usize; train.len()];
        let mut mismatch = 0.0;
        for round in 0..rounds {
            for (t, order) in orders.iter().enumerate() {
                let Some(idx) = order.get(round) else { continue };
                let images: Vec<Tensor3> = idx.iter().map(|&i| train[t].images[i].clone()).collect();
                let labels: Vec<usize> = idx.iter().map(|&i| train[t].labels[i]).collect();
                let batch = TaskBatch {
                    task: t,
                    images: &images,
                    labels: &labels,
                };
                let (loss, grads) = calibration_loss(&current, &[batch], originals, cfg)?;
                if !loss.total.is_finite() || !grads.is_finite() {
                    return Err(Error::Divergence { epoch, loss: loss.total });
                }
                let tl = &loss.tasks[0];
                ce[t] += tl.cross_entropy * tl.samples as f64;
                mismatch += tl.mismatch * tl.samples as f64;
                seen[t] += tl.samples;
                opt.step(&mut current, &grads);
            }
        }
        let entry = CalibrationEpoch {
            epoch,
            task_loss: ce.iter().zip(&seen).map(|(c, &n)| c / n.max(1) as f64).collect(),
            task_accuracy: validation_accuracy(&current, data)?,
            mismatch: Some(mismatch / seen.iter().sum::<usize>().max(1) as f64 * train.len() as f64),
        };
        if entry.mean_accuracy() > best.0 {
            best = (entry.mean_accuracy(), epoch, current.clone());
        }
        log.push(entry);
    }
    let (_, best_epoch, model) = best;
    Ok(CalibrationOutcome { model, best_epoch, log })
}

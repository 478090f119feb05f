//! Speed prediction and single-thread wall-time measurement of merged
//! models against the unrolled-convolution originals.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::einfer::{merged_forward_with, Scratch, Trace};
use crate::error::{Error, Result};
use crate::netdef::{apply_layer, Layer, LayerKind, Model};
use crate::quantize::{compression_stats, MemberGeometry, MergedModel};
use crate::tensor::{conv_unrolled_with, Tensor3};

pub const MIN_REPETITIONS: usize = 30;

/// Time units of the complexity model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Seconds per `1 x 1 x r` convolution over the layer's `N x M` plane.
    pub tau_r: f64,
    /// Seconds per table-indexing operation.
    pub tau_x: f64,
}

/// Geometry entering the complexity model of one merged conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub rows: usize,
    pub cols: usize,
    pub depth: usize,
    /// Kernel vectors per segment over all merged models (`C_AB`).
    pub vectors: usize,
}

/// `(C tau_r + N M d tau_x / r) / (C_AB tau_r)`: merged time over the time
/// of convolving every kernel vector separately.
pub fn complexity_ratio(g: &LayerGeometry, r: usize, c: usize, cost: &CostModel) -> f64 {
    let index = (g.rows * g.cols * g.depth) as f64 * cost.tau_x / r as f64;
    (c as f64 * cost.tau_r + index) / (g.vectors as f64 * cost.tau_r)
}

/// Predicted speedup, baseline time over merged time (> 1 means the merged
/// layer is faster). The reciprocal of [`complexity_ratio`].
pub fn predict_speedup(g: &LayerGeometry, r: usize, c: usize, cost: &CostModel) -> f64 {
    1.0 / complexity_ratio(g, r, c, cost)
}

/// Seconds per length-`r` dot product, from a loop of `iterations` products.
pub fn time_dot(r: usize, iterations: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pool = 1024;
    let a: Vec<f64> = (0..pool * r).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
    let start = Instant::now();
    let mut acc = 0.0;
    for k in 0..iterations {
        let v = &a[(k % pool) * r..(k % pool + 1) * r];
        acc += v.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
    }
    black_box(acc);
    start.elapsed().as_secs_f64() / iterations.max(1) as f64
}

/// Seconds per random table read-and-accumulate.
pub fn time_gather(iterations: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let table: Vec<f64> = (0..1 << 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let idx: Vec<u32> = (0..1 << 16).map(|_| rng.random_range(0..table.len() as u32)).collect();
    let start = Instant::now();
    let mut acc = 0.0;
    for k in 0..iterations {
        acc += table[idx[k & 0xffff] as usize];
    }
    black_box(acc);
    start.elapsed().as_secs_f64() / iterations.max(1) as f64
}

impl CostModel {
    /// Calibrates `tau_r` for an `N x M` plane at segment length `r`.
    pub fn calibrate(r: usize, pixels: usize, iterations: usize) -> Self {
        Self {
            tau_r: time_dot(r, iterations) * pixels as f64,
            tau_x: time_gather(iterations),
        }
    }
}

/// Restricts the calling thread to the CPU it is running on. Returns
/// whether pinning took effect.
pub fn pin_to_one_core() -> bool {
    #[cfg(target_os = "linux")]
    {
        // SAFETY: cpu_set_t is plain data; the calls only read and write it.
        unsafe {
            let cpu = libc::sched_getcpu();
            if cpu < 0 {
                return false;
            }
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(cpu as usize, &mut set);
            libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
        }
    }
    #[cfg(not(target_os = "linux"))]
    {
        false
    }
}

/// Median and inter-quartile range of a sample of seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median: f64,
    pub iqr: f64,
}

impl Timing {
    pub fn of(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| {
            if s.is_empty() {
                return 0.0;
            }
            let pos = p * (s.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
        };
        Timing {
            median: q(0.5),
            iqr: q(0.75) - q(0.25),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub merged: Timing,
    pub baseline: Timing,
    /// `baseline.median / merged.median`, unclamped.
    pub speedup: f64,
}

impl Comparison {
    fn new(merged: &[f64], baseline: &[f64]) -> Self {
        let (merged, baseline) = (Timing::of(merged), Timing::of(baseline));
        Comparison {
            speedup: baseline.median / merged.median,
            merged,
            baseline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBench {
    pub layer: String,
    pub kind: LayerKind,
    pub r: usize,
    pub c: usize,
    pub original_bytes: usize,
    pub merged_bytes: usize,
    pub ratio: f64,
    pub predicted_speedup: Option<f64>,
    pub measured: Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// How `speedup` is defined in this report.
    pub definition: String,
    pub repetitions: usize,
    pub inputs_per_task: usize,
    pub pinned: bool,
    pub cost: Option<CostModel>,
    pub layers: Vec<LayerBench>,
    /// Whole forward passes of every task.
    pub whole_model: Comparison,
    /// Conv layers only.
    pub conv_only: Comparison,
    pub compression_coefficients: f64,
    pub compression_whole_model: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmup: usize,
    /// Iterations of the tau microbenchmarks; 0 skips prediction.
    pub calibration_iterations: usize,
    pub pin: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: MIN_REPETITIONS,
            warmup: 3,
            calibration_iterations: 10_000_000,
            pin: true,
        }
    }
}

/// Per-layer seconds of one dense forward pass.
fn timed_dense(model: &Model, x: &Tensor3, patches: &mut Vec<f64>, out: &mut [f64]) -> Result<()> {
    let mut cur = x.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        let start = Instant::now();
        cur = match layer {
            Layer::Softmax => break,
            Layer::Conv(c) => conv_unrolled_with(&cur, &c.kernels, &c.bias, patches)?,
            other => apply_layer(other, cur)?,
        };
        out[i] += start.elapsed().as_secs_f64();
    }
    black_box(&cur);
    Ok(())
}

/// Median wall time of the merged model (all tasks) against the sum of the
/// original models' unrolled-convolution forwards, single-threaded.
pub fn measure_speedup(
    mm: &MergedModel,
    originals: &[&Model],
    inputs: &[Vec<Tensor3>],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if originals.len() != mm.tasks.len() || inputs.len() != mm.tasks.len() {
        return Err(Error::Config(format!(
            "{} tasks need as many originals and input sets",
            mm.tasks.len()
        )));
    }
    let pinned = cfg.pin && pin_to_one_core();
    let reps = cfg.repetitions.max(MIN_REPETITIONS);
    let n_layers: Vec<usize> = originals.iter().map(|m| m.layers.len()).collect();
    let mut scratch = Scratch::default();
    let mut patches = Vec::new();

    let mut merged_total = Vec::with_capacity(reps);
    let mut base_total = Vec::with_capacity(reps);
    let mut merged_conv = Vec::with_capacity(reps);
    let mut base_conv = Vec::with_capacity(reps);
    let mut merged_layer = vec![Vec::with_capacity(reps); mm.elayers.len()];
    let mut base_layer = vec![Vec::with_capacity(reps); mm.elayers.len()];

    for rep in 0..cfg.warmup + reps {
        let mut m_layers: Vec<Vec<f64>> = n_layers.iter().map(|&n| vec![0.0; n]).collect();
        let mut b_layers: Vec<Vec<f64>> = n_layers.iter().map(|&n| vec![0.0; n]).collect();
        let start = Instant::now();
        for (t, xs) in inputs.iter().enumerate() {
            for x in xs {
                let mut trace = Trace::default();
                black_box(merged_forward_with(mm, t, x, &mut scratch, Some(&mut trace))?);
                for l in &trace.layers {
                    m_layers[t][l.index] += l.elapsed.as_secs_f64();
                }
            }
        }
        let merged_secs = start.elapsed().as_secs_f64();
        let start = Instant::now();
        for (t, xs) in inputs.iter().enumerate() {
            for x in xs {
                timed_dense(originals[t], x, &mut patches, &mut b_layers[t])?;
            }
        }
        let base_secs = start.elapsed().as_secs_f64();
        if rep < cfg.warmup {
            continue;
        }
        merged_total.push(merged_secs);
        base_total.push(base_secs);
        let conv_sum = |times: &[Vec<f64>]| -> f64 {
            originals
                .iter()
                .enumerate()
                .flat_map(|(t, m)| m.conv_indices().into_iter().map(move |i| (t, i)))
                .map(|(t, i)| times[t][i])
                .sum()
        };
        merged_conv.push(conv_sum(&m_layers));
        base_conv.push(conv_sum(&b_layers));
        for (li, layer) in mm.elayers.iter().enumerate() {
            merged_layer[li].push(layer.members.iter().map(|m| m_layers[m.task][m.layer]).sum());
            base_layer[li].push(layer.members.iter().map(|m| b_layers[m.task][m.layer]).sum());
        }
    }

    let compression = compression_stats(originals, mm);
    let predict = cfg.calibration_iterations > 0;
    let mut cost_used = None;
    let mut layers = Vec::with_capacity(mm.elayers.len());
    for (li, layer) in mm.elayers.iter().enumerate() {
        let stats = &compression.layers[li];
        let predicted = match layer.members[0].geometry {
            MemberGeometry::Conv { d, .. } if predict => {
                let m = &layer.members[0];
                let shape = originals[m.task].validate()?[m.layer];
                let g = LayerGeometry {
                    rows: shape.rows,
                    cols: shape.cols,
                    depth: d,
                    vectors: layer.codebooks.first().map_or(0, |b| b.vectors),
                };
                let model = CostModel::calibrate(layer.r(), g.rows * g.cols, cfg.calibration_iterations);
                cost_used.get_or_insert(model);
                let c = layer.codebooks.first().map_or(0, |b| b.count());
                Some(predict_speedup(&g, layer.r(), c, &model))
            }
            _ => None,
        };
        layers.push(LayerBench {
            layer: layer.name.clone(),
            kind: layer.kind,
            r: layer.r(),
            c: layer.params.c,
            original_bytes: stats.original_bytes,
            merged_bytes: stats.merged_bytes,
            ratio: stats.ratio,
            predicted_speedup: predicted,
            measured: Comparison::new(&merged_layer[li], &base_layer[li]),
        });
    }
    Ok(BenchReport {
        definition: "speedup = (sum of original models' forward times) / (merged model forward time over all tasks)".into(),
        repetitions: reps,
        inputs_per_task: inputs.iter().map(Vec::len).max().unwrap_or(0),
        pinned,
        cost: cost_used,
        layers,
        whole_model: Comparison::new(&merged_total, &base_total),
        conv_only: Comparison::new(&merged_conv, &base_conv),
        compression_coefficients: compression.coefficients.ratio,
        compression_whole_model: compression.whole_model.ratio,
    })
}

fn ms(s: f64) -> String {
    format!("{:.3}", s * 1e3)
}

impl BenchReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out += &format!(
            "Speedup is {}. {} repetitions, {} inputs per task, pinned: {}.\n\n",
            self.definition.trim_start_matches("speedup = "),
            self.repetitions,
            self.inputs_per_task,
            self.pinned
        );
        out += "| layer | r/C | orig bytes | merged bytes | ratio | predicted speedup | merged ms (IQR) | baseline ms (IQR) | measured speedup |\n";
        out += "|---|---|---|---|---|---|---|---|---|\n";
        for l in &self.layers {
            let c = if l.c == usize::MAX { "lossless".to_string() } else { l.c.to_string() };
            out += &format!(
                "| {} | {}/{} | {} | {} | {:.2}x | {} | {} ({}) | {} ({}) | {:.2}x |\n",
                l.layer,
                l.r,
                c,
                l.original_bytes,
                l.merged_bytes,
                l.ratio,
                l.predicted_speedup.map_or("-".into(), |p| format!("{p:.2}x")),
                ms(l.measured.merged.median),
                ms(l.measured.merged.iqr),
                ms(l.measured.baseline.median),
                ms(l.measured.baseline.iqr),
                l.measured.speedup
            );
        }
        for (name, c) in [("whole model", &self.whole_model), ("conv layers only", &self.conv_only)] {
            out += &format!(
                "\n{name}: merged {} ms (IQR {}), baseline {} ms (IQR {}), speedup {:.2}x",
                ms(c.merged.median),
                ms(c.merged.iqr),
                ms(c.baseline.median),
                ms(c.baseline.iqr),
                c.speedup
            );
        }
        out += &format!(
            "\n\ncompression: {:.2}x (quantized-layer coefficients), {:.2}x (whole model)\n",
            self.compression_coefficients, self.compression_whole_model
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::{LayerParams, MergeParams};
    use crate::testkit::{input, merge, rng, tiny_model, Tiny};

    #[test]
    fn formula_matches_hand_values() {
        let g = LayerGeometry {
            rows: 14,
            cols: 14,
            depth: 32,
            vectors: 3200,
        };
        let cost = CostModel { tau_r: 2.0, tau_x: 0.5 };
        // (128 * 2 + 14 * 14 * 32 * 0.5 / 8) / (3200 * 2) = 648 / 6400
        assert_eq!(complexity_ratio(&g, 8, 128, &cost), 648.0 / 6400.0);
        assert_eq!(predict_speedup(&g, 8, 128, &cost), 6400.0 / 648.0);
        let g = LayerGeometry { rows: 3, cols: 5, depth: 6, vectors: 40 };
        let cost = CostModel { tau_r: 1.5, tau_x: 0.25 };
        assert_eq!(complexity_ratio(&g, 3, 10, &cost), (15.0 + 90.0 * 0.25 / 3.0) / 60.0);
    }

    #[test]
    fn limits_and_monotonicity() {
        let g = LayerGeometry { rows: 8, cols: 8, depth: 16, vectors: 400 };
        let free = CostModel { tau_r: 1e-6, tau_x: 0.0 };
        assert!((predict_speedup(&g, 4, 400, &free) - 1.0).abs() < 1e-12);
        let cost = CostModel { tau_r: 1e-6, tau_x: 1e-9 };
        assert!(predict_speedup(&g, 4, 64, &cost) > predict_speedup(&g, 4, 128, &cost));
        assert!(predict_speedup(&g, 8, 64, &cost) > predict_speedup(&g, 4, 64, &cost));
    }

    #[test]
    fn timing_quantiles() {
        let t = Timing::of(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(t.median, 3.0);
        assert_eq!(t.iqr, 2.0);
    }

    #[test]
    fn report_is_complete_and_unclamped() {
        let t = Tiny { rows: 4, cols: 4, depth: 2, kernel: 3, kernels: 3, hidden: 8, classes: 2 };
        let a = tiny_model("a", t, 1);
        let b = tiny_model("b", t, 2);
        let mm = merge(&[&a, &b], MergeParams::uniform(LayerParams::lossless(1)), 1);
        let mut g = rng(1);
        let inputs: Vec<Vec<Tensor3>> = (0..2).map(|_| vec![input(&mut g, a.input_shape)]).collect();
        let cfg = BenchConfig {
            repetitions: 5,
            warmup: 1,
            calibration_iterations: 1000,
            pin: false,
        };
        let report = measure_speedup(&mm, &[&a, &b], &inputs, &cfg).unwrap();
        assert_eq!(report.repetitions, MIN_REPETITIONS);
        assert_eq!(report.layers.len(), 2);
        assert!(report.layers[0].predicted_speedup.is_some());
        assert!(report.whole_model.speedup > 0.0);
        let json = serde_json::to_string(&report).unwrap();
        let back: BenchReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        let md = report.to_markdown();
        assert!(md.contains("| conv1 |") && md.contains("whole model"));
    }
}

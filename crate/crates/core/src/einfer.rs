//! Lookup-table execution of merged models.
//!
//! For every depth segment `v` of the input, the inner products of each
//! pixel's segment with each codeword are computed once into a table. An
//! E-Conv output is then a sum of table entries picked by the assignment
//! map and shifted by the kernel offset:
//!
//! ```text
//! y(i, j, t) = bias[t] + sum_v sum_{i0, j0} table_v(i + i0, j + j0, pi(i0, j0, v, t))
//! ```
//!
//! E-FC layers do the same with a table of `C` inner products per segment.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::netdef::{apply_layer, Forward, Layer, LayerKind};
use crate::quantize::{ELayer, EMember, MemberGeometry, MergedModel, SegmentCodebook, TaskLayer, TaskModel};
use crate::tensor::{gemm, valid_range, Tensor3};

/// Per-segment tables of codeword inner products for one input volume.
///
/// Plane `c` of segment `v` holds `<x(i, j, <v>), b_{c,v}>` for every pixel,
/// row-major over `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    pub rows: usize,
    pub cols: usize,
    /// Codeword count of each segment.
    pub counts: Vec<usize>,
    planes: Vec<f64>,
    offsets: Vec<usize>,
}

impl LookupTable {
    #[inline]
    pub fn entry(&self, v: usize, i: usize, j: usize, c: usize) -> f64 {
        let px = self.rows * self.cols;
        self.planes[self.offsets[v] + c * px + i * self.cols + j]
    }

    pub fn plane(&self, v: usize, c: usize) -> &[f64] {
        let px = self.rows * self.cols;
        let s = self.offsets[v] + c * px;
        &self.planes[s..s + px]
    }
}

/// Multiply-add and index-add counts of the lookup path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    /// Multiply-adds spent filling tables (`N * M * rho * C * r` per E-Conv).
    pub table_macs: u64,
    /// Table entries accumulated into outputs.
    pub index_adds: u64,
    /// Multiply-adds of layers executed densely.
    pub dense_macs: u64,
}

impl std::ops::AddAssign for OpCount {
    fn add_assign(&mut self, o: Self) {
        self.table_macs += o.table_macs;
        self.index_adds += o.index_adds;
        self.dense_macs += o.dense_macs;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Position in the task's layer list.
    pub index: usize,
    pub kind: LayerKind,
    pub quantized: bool,
    pub ops: OpCount,
    pub elapsed: Duration,
}

/// Instrumentation sink filled by [`merged_forward_with`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub layers: Vec<LayerTrace>,
}

impl Trace {
    pub fn total_ops(&self) -> OpCount {
        let mut total = OpCount::default();
        for l in &self.layers {
            total += l.ops;
        }
        total
    }
}

/// Reusable buffers so repeated inference does not allocate per call.
#[derive(Debug, Default)]
pub struct Scratch {
    table: Vec<f64>,
    accum: Vec<f64>,
    patches: Vec<f64>,
}

fn member(layer: &ELayer, task: usize) -> Result<&EMember> {
    layer
        .member_for(task)
        .ok_or_else(|| Error::UnknownTask(format!("task {task} in layer `{}`", layer.name)))
}

fn books<'a>(layer: &'a ELayer, m: &EMember) -> Vec<&'a SegmentCodebook> {
    m.books.iter().map(|&b| &layer.codebooks[b]).collect()
}

fn check_assignments(layer: &ELayer, m: &EMember) -> Result<()> {
    let rho = m.segments();
    for (k, &c) in m.assign.iter().enumerate() {
        let count = layer.codebooks[m.books[k % rho]].count();
        if c as usize >= count {
            return Err(Error::CodewordRange {
                index: c as usize,
                count,
            });
        }
    }
    Ok(())
}

fn fill_table(
    x: &Tensor3,
    codebooks: &[&SegmentCodebook],
    planes: &mut Vec<f64>,
    ops: &mut OpCount,
) -> Result<Vec<usize>> {
    let d = x.depth();
    let Some(r) = codebooks.first().map(|b| b.r) else {
        return Err(Error::Shape("no codebooks to build a table from".into()));
    };
    if codebooks.iter().any(|b| b.r != r) || d.div_ceil(r) != codebooks.len() {
        return Err(Error::Shape(format!(
            "input depth {d} does not split into {} segments of length {r}",
            codebooks.len()
        )));
    }
    let px = x.n_rows() * x.n_cols();
    let mut offsets = Vec::with_capacity(codebooks.len());
    let mut total = 0;
    for b in codebooks {
        offsets.push(total);
        total += b.count() * px;
    }
    planes.clear();
    planes.resize(total, 0.0);
    for (v, book) in codebooks.iter().enumerate() {
        // the zero padding of the last input segment is implied by truncating the codewords
        let width = r.min(d - v * r);
        let out = &mut planes[offsets[v]..offsets[v] + book.count() * px];
        gemm(
            px,
            width,
            book.count(),
            &x.data()[v * r..],
            (d, 1),
            &book.words,
            (1, r),
            out,
            (1, px),
            0.0,
        );
        ops.table_macs += (px * book.count() * r) as u64;
    }
    Ok(offsets)
}

/// Builds the lookup table of `x` against a member's per-segment codebooks.
pub fn build_lookup(x: &Tensor3, codebooks: &[&SegmentCodebook]) -> Result<LookupTable> {
    let mut planes = Vec::new();
    let mut ops = OpCount::default();
    let offsets = fill_table(x, codebooks, &mut planes, &mut ops)?;
    Ok(LookupTable {
        rows: x.n_rows(),
        cols: x.n_cols(),
        counts: codebooks.iter().map(|b| b.count()).collect(),
        planes,
        offsets,
    })
}

/// E-Conv forward for one task.
pub fn econv_forward(x: &Tensor3, layer: &ELayer, task: usize) -> Result<Tensor3> {
    let mut ops = OpCount::default();
    econv_forward_with(x, layer, task, &mut Scratch::default(), &mut ops)
}

pub fn econv_forward_with(
    x: &Tensor3,
    layer: &ELayer,
    task: usize,
    scratch: &mut Scratch,
    ops: &mut OpCount,
) -> Result<Tensor3> {
    let m = member(layer, task)?;
    let MemberGeometry::Conv { n, m: k_cols, d, p } = m.geometry else {
        return Err(Error::Shape(format!("layer `{}` is not a conv layer", layer.name)));
    };
    if x.depth() != d {
        return Err(Error::Shape(format!(
            "layer `{}` expects depth {d}, input is {}",
            layer.name,
            x.shape()
        )));
    }
    check_assignments(layer, m)?;
    let codebooks = books(layer, m);
    let offsets = fill_table(x, &codebooks, &mut scratch.table, ops)?;
    let (rows, cols) = (x.n_rows(), x.n_cols());
    let px = rows * cols;
    let rho = m.segments();
    let (w, h) = ((n / 2) as isize, (k_cols / 2) as isize);

    let acc = &mut scratch.accum;
    acc.clear();
    acc.resize(p * px, 0.0);
    for t in 0..p {
        let out = &mut acc[t * px..(t + 1) * px];
        out.fill(m.bias[t]);
        for a in 0..n {
            let i0 = a as isize - w;
            let (i_lo, i_hi) = valid_range(i0, rows);
            for b in 0..k_cols {
                let j0 = b as isize - h;
                let (j_lo, j_hi) = valid_range(j0, cols);
                if i_lo >= i_hi || j_lo >= j_hi {
                    continue;
                }
                let base = ((t * n + a) * k_cols + b) * rho;
                for (v, &off) in offsets.iter().enumerate().take(rho) {
                    let c = m.assign[base + v] as usize;
                    let plane = &scratch.table[off + c * px..off + (c + 1) * px];
                    for i in i_lo..i_hi {
                        let src_row = (i as isize + i0) as usize * cols;
                        let src = &plane[(src_row as isize + j_lo as isize + j0) as usize..];
                        let dst = &mut out[i * cols + j_lo..i * cols + j_hi];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                    ops.index_adds += ((i_hi - i_lo) * (j_hi - j_lo)) as u64;
                }
            }
        }
    }
    let mut y = Tensor3::zeros(rows, cols, p);
    let data = y.data_mut();
    for t in 0..p {
        for q in 0..px {
            data[q * p + t] = acc[t * px + q];
        }
    }
    Ok(y)
}

/// E-FC forward for one task.
pub fn efc_forward(x: &[f64], layer: &ELayer, task: usize) -> Result<Vec<f64>> {
    let mut ops = OpCount::default();
    efc_forward_with(x, layer, task, &mut Scratch::default(), &mut ops)
}

pub fn efc_forward_with(
    x: &[f64],
    layer: &ELayer,
    task: usize,
    scratch: &mut Scratch,
    ops: &mut OpCount,
) -> Result<Vec<f64>> {
    let m = member(layer, task)?;
    let MemberGeometry::Fc { n_in, n_out } = m.geometry else {
        return Err(Error::Shape(format!("layer `{}` is not an fc layer", layer.name)));
    };
    if x.len() != n_in {
        return Err(Error::Shape(format!(
            "layer `{}` expects {n_in} inputs, got {}",
            layer.name,
            x.len()
        )));
    }
    check_assignments(layer, m)?;
    let r = layer.r();
    let rho = m.segments();
    let table = &mut scratch.table;
    table.clear();
    let mut offsets = Vec::with_capacity(rho);
    for v in 0..rho {
        let book = &layer.codebooks[m.books[v]];
        offsets.push(table.len());
        let seg = &x[v * r..(v * r + r).min(n_in)];
        for word in book.words.chunks_exact(r) {
            table.push(seg.iter().zip(word).map(|(a, b)| a * b).sum());
        }
        ops.table_macs += (book.count() * r) as u64;
    }
    let out = (0..n_out)
        .map(|o| {
            let idx = &m.assign[o * rho..(o + 1) * rho];
            m.bias[o]
                + idx
                    .iter()
                    .enumerate()
                    .map(|(v, &c)| table[offsets[v] + c as usize])
                    .sum::<f64>()
        })
        .collect();
    ops.index_adds += (n_out * rho) as u64;
    Ok(out)
}

fn dense_macs(layer: &Layer, input: &Tensor3) -> u64 {
    match layer {
        Layer::Conv(c) => (input.n_rows() * input.n_cols() * c.kernels.count() * c.kernels.kernel_len()) as u64,
        Layer::Fc(f) => (f.n_in * f.n_out) as u64,
        _ => 0,
    }
}

/// Runs task `task` of the merged model, lookup tables for quantized layers
/// and the task's own layers elsewhere.
pub fn merged_forward(mm: &MergedModel, task: usize, x: &Tensor3) -> Result<Forward> {
    merged_forward_with(mm, task, x, &mut Scratch::default(), None)
}

/// [`merged_forward`] with a caller-owned scratch arena and an optional trace.
pub fn merged_forward_with(
    mm: &MergedModel,
    task: usize,
    x: &Tensor3,
    scratch: &mut Scratch,
    mut trace: Option<&mut Trace>,
) -> Result<Forward> {
    let tm = mm
        .tasks
        .get(task)
        .ok_or_else(|| Error::UnknownTask(task.to_string()))?;
    if x.shape() != tm.input_shape {
        return Err(Error::LayerShape {
            layer: 0,
            message: format!("input is {}, task `{}` expects {}", x.shape(), tm.name, tm.input_shape),
        });
    }
    let tap_points = task_tap_points(tm);
    let mut cur = x.clone();
    let mut taps = Vec::with_capacity(tap_points.len());
    for (idx, tl) in tm.layers.iter().enumerate() {
        let start = Instant::now();
        let mut ops = OpCount::default();
        let kind = match tl {
            TaskLayer::Quantized { elayer, .. } => {
                let layer = &mm.elayers[*elayer];
                cur = match layer.kind {
                    LayerKind::Conv => econv_forward_with(&cur, layer, task, scratch, &mut ops)?,
                    _ => {
                        if cur.n_rows() != 1 || cur.n_cols() != 1 {
                            return Err(Error::LayerShape {
                                layer: idx,
                                message: format!("fc layer `{}` needs a flat input, got {}", layer.name, cur.shape()),
                            });
                        }
                        Tensor3::vector(efc_forward_with(cur.data(), layer, task, scratch, &mut ops)?)
                    }
                };
                layer.kind
            }
            TaskLayer::Plain(layer) => {
                if let Err(message) = layer.output_shape(cur.shape()) {
                    return Err(Error::LayerShape { layer: idx, message });
                }
                if matches!(layer, Layer::Softmax) {
                    return Ok(Forward {
                        logits: cur.into_data(),
                        taps,
                    });
                }
                ops.dense_macs = dense_macs(layer, &cur);
                cur = match layer {
                    Layer::Conv(c) => {
                        crate::tensor::conv_unrolled_with(&cur, &c.kernels, &c.bias, &mut scratch.patches)?
                    }
                    _ => apply_layer(layer, cur)?,
                };
                layer.kind()
            }
        };
        if tap_points.contains(&idx) {
            taps.push(cur.clone());
        }
        if let Some(trace) = trace.as_deref_mut() {
            trace.layers.push(LayerTrace {
                index: idx,
                kind,
                quantized: matches!(tl, TaskLayer::Quantized { .. }),
                ops,
                elapsed: start.elapsed(),
            });
        }
    }
    Err(Error::Shape(format!("task `{}` has no softmax layer", tm.name)))
}

/// Same rule as [`crate::netdef::Model::tap_points`].
fn task_tap_points(tm: &TaskModel) -> Vec<usize> {
    let weighted = |l: &TaskLayer| match l {
        TaskLayer::Quantized { .. } => true,
        TaskLayer::Plain(layer) => matches!(layer, Layer::Conv(_) | Layer::Fc(_)),
    };
    tm.layers
        .iter()
        .enumerate()
        .filter(|(_, l)| weighted(l))
        .map(|(i, _)| match tm.layers.get(i + 1) {
            Some(TaskLayer::Plain(Layer::Relu)) => i + 1,
            _ => i,
        })
        .collect()
}

/// Fraction of `dataset` classified correctly by task `task`.
pub fn merged_accuracy(mm: &MergedModel, task: usize, dataset: &crate::netdef::Dataset) -> Result<f64> {
    let mut scratch = Scratch::default();
    let mut correct = 0;
    for (x, &label) in dataset.images.iter().zip(&dataset.labels) {
        if merged_forward_with(mm, task, x, &mut scratch, None)?.predicted() == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::forward_reference;
    use crate::quantize::{LayerParams, MergeParams};
    use crate::tensor::conv_direct;
    use crate::testkit::{input, max_rel, merge, rng, tiny_model, uniform, Tiny};
    use crate::Shape3;

    fn book(r: usize, words: Vec<f64>) -> SegmentCodebook {
        SegmentCodebook {
            segment: 0,
            r,
            vectors: 0,
            quant_error: 0.0,
            members: vec![0],
            words,
        }
    }

    fn tiny(depth: usize, kernel: usize, kernels: usize) -> Tiny {
        Tiny {
            rows: 4,
            cols: 4,
            depth,
            kernel,
            kernels,
            hidden: 12,
            classes: 3,
        }
    }

    #[test]
    fn unit_codeword_selects_a_channel() {
        let mut g = rng(1);
        let x = input(&mut g, Shape3::new(3, 4, 5));
        // segments of length 2: channels {0,1}, {2,3}, {4, pad}
        let books: Vec<_> = (0..3).map(|_| book(2, vec![1.0, 0.0, 0.0, 1.0])).collect();
        let table = build_lookup(&x, &books.iter().collect::<Vec<_>>()).unwrap();
        for v in 0..3 {
            for i in 0..3 {
                for j in 0..4 {
                    assert_eq!(table.entry(v, i, j, 0), x.get(i, j, 2 * v));
                    let second = if v < 2 { x.get(i, j, 2 * v + 1) } else { 0.0 };
                    assert_eq!(table.entry(v, i, j, 1), second);
                }
            }
        }
    }

    #[test]
    fn ones_input_sums_codeword() {
        let x = Tensor3::from_vec(2, 2, 3, vec![1.0; 12]).unwrap();
        let b = book(3, vec![0.5, -2.0, 4.0]);
        let table = build_lookup(&x, &[&b]).unwrap();
        assert!(table.plane(0, 0).iter().all(|&e| e == 2.5));
    }

    #[test]
    fn table_matches_dot_products() {
        let mut g = rng(2);
        for case in 0..20 {
            let (d, r, c) = (3 + case % 7, 1 + case % 4, 1 + case % 5);
            let x = input(&mut g, Shape3::new(5, 3, d));
            let books: Vec<_> = (0..d.div_ceil(r)).map(|_| book(r, uniform(&mut g, c * r))).collect();
            let table = build_lookup(&x, &books.iter().collect::<Vec<_>>()).unwrap();
            for (v, b) in books.iter().enumerate() {
                for cw in 0..c {
                    for i in 0..5 {
                        for j in 0..3 {
                            let direct: f64 = (0..r)
                                .filter(|k| v * r + k < d)
                                .map(|k| x.get(i, j, v * r + k) * b.word(cw)[k])
                                .sum();
                            assert!((table.entry(v, i, j, cw) - direct).abs() < 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn segmentation_mismatch_is_an_error() {
        let x = Tensor3::zeros(2, 2, 5);
        let b = book(2, vec![0.0; 2]);
        assert!(matches!(build_lookup(&x, &[&b, &b]), Err(Error::Shape(_))));
    }

    fn elayer_oracle(mm: &MergedModel, li: usize, seed: u64) {
        let mut g = rng(seed);
        let layer = &mm.elayers[li];
        for (mi, m) in layer.members.iter().enumerate() {
            let dense = layer.dequantized(mi).unwrap();
            let task = &mm.tasks[m.task];
            match &dense {
                Layer::Conv(c) => {
                    let x = input(&mut g, Shape3::new(task.input_shape.rows, task.input_shape.cols, c.kernels.depth()));
                    let want = conv_direct(&x, &c.kernels, &c.bias).unwrap();
                    let got = econv_forward(&x, layer, m.task).unwrap();
                    assert!(max_rel(got.data(), want.data()) < 1e-5);
                }
                Layer::Fc(f) => {
                    let x = uniform(&mut g, f.n_in);
                    let got = efc_forward(&x, layer, m.task).unwrap();
                    assert!(max_rel(&got, &f.apply(&x)) < 1e-5);
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn econv_matches_dequantized_conv_for_both_tasks() {
        // 3x3 vs 5x5 at depth 8, r = 4, C = 16
        for seed in 0..4 {
            let a = tiny_model("a", tiny(8, 3, 4), seed);
            let b = tiny_model("b", tiny(8, 5, 6), seed + 100);
            let mm = merge(&[&a, &b], MergeParams::uniform(LayerParams::new(4, 16)), seed);
            elayer_oracle(&mm, 0, seed);
        }
    }

    #[test]
    fn efc_matches_dequantized_product() {
        // fc inputs of 4*4*4 = 64 and 4*4*6 = 96, r = 8, C = 32
        for seed in 0..4 {
            let a = tiny_model("a", Tiny { hidden: 24, ..tiny(2, 3, 4) }, seed);
            let b = tiny_model("b", Tiny { hidden: 24, ..tiny(2, 3, 6) }, seed + 100);
            let params = MergeParams::uniform(LayerParams::new(8, 32)).with("conv1", LayerParams::new(2, 8));
            let mm = merge(&[&a, &b], params, seed);
            assert_eq!(mm.elayers[1].kind, LayerKind::Fc);
            elayer_oracle(&mm, 1, seed);
        }
    }

    #[test]
    fn surplus_depth_segments_match_oracle() {
        let a = tiny_model("a", tiny(3, 3, 4), 7);
        let b = tiny_model("b", tiny(8, 5, 4), 8);
        let mm = merge(&[&a, &b], MergeParams::uniform(LayerParams::new(2, 8)), 7);
        assert!(mm.elayers[0].codebooks.iter().any(|b| !b.is_shared()));
        elayer_oracle(&mm, 0, 7);
        elayer_oracle(&mm, 1, 7);
    }

    #[test]
    fn lossless_layers_equal_originals() {
        let a = tiny_model("a", tiny(4, 3, 4), 1);
        let b = tiny_model("b", tiny(4, 5, 4), 2);
        let mm = merge(&[&a, &b], MergeParams::uniform(LayerParams::lossless(2)), 1);
        let mut g = rng(3);
        for (t, model) in [&a, &b].into_iter().enumerate() {
            for _ in 0..100 {
                let x = input(&mut g, model.input_shape);
                let want = forward_reference(model, &x).unwrap();
                let got = merged_forward(&mm, t, &x).unwrap();
                assert!(max_rel(&got.logits, &want.logits) < 1e-6);
                assert_eq!(got.taps.len(), want.taps.len());
                assert_eq!(got.predicted(), want.predicted());
            }
        }
    }

    #[test]
    fn single_codeword_broadcasts_one_plane() {
        let a = tiny_model("a", tiny(2, 1, 3), 1);
        let mut b = a.clone();
        b.name = "b".into();
        let params = MergeParams::uniform(LayerParams::new(2, 4)).with("conv1", LayerParams::new(2, 1));
        let mut mm = merge(&[&a, &b], params, 1);
        mm.elayers[0].members[0].bias = vec![0.0, 1.0, -2.0];
        let x = input(&mut rng(5), Shape3::new(4, 4, 2));
        let y = econv_forward(&x, &mm.elayers[0], 0).unwrap();
        let table = build_lookup(&x, &[&mm.elayers[0].codebooks[0]]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for (t, bias) in [0.0, 1.0, -2.0].into_iter().enumerate() {
                    assert!((y.get(i, j, t) - (table.entry(0, i, j, 0) + bias)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_input_gives_bias() {
        let a = tiny_model("a", tiny(2, 3, 4), 1);
        let b = tiny_model("b", tiny(2, 3, 4), 2);
        let mm = merge(&[&a, &b], MergeParams::uniform(LayerParams::new(2, 8)), 1);
        let layer = &mm.elayers[1];
        for t in 0..2 {
            let y = efc_forward(&vec![0.0; 64], layer, t).unwrap();
            assert_eq!(y, layer.member_for(t).unwrap().bias);
        }
    }

    #[test]
    fn merged_forward_agrees_with_dequantized_model() {
        let a = tiny_model("a", tiny(4, 3, 4), 1);
        let b = tiny_model("b", tiny(4, 5, 5), 2);
        let mm = merge(&[&a, &b], MergeParams::uniform(LayerParams::new(2, 6)), 1);
        let mut g = rng(9);
        for t in 0..2 {
            let dense = mm.dequantized_model(t).unwrap();
            for _ in 0..10 {
                let x = input(&mut g, dense.input_shape);
                let want = forward_reference(&dense, &x).unwrap();
                let got = merged_forward(&mm, t, &x).unwrap();
                assert!(max_rel(&got.logits, &want.logits) < 1e-4);
                for (p, q) in got.taps.iter().zip(&want.taps) {
                    assert!(max_rel(p.data(), q.data()) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn bad_inputs_and_tasks_are_errors() {
        let a = tiny_model("a", tiny(2, 3, 4), 1);
        let b = tiny_model("b", tiny(3, 3, 4), 2);
        let mm = merge(&[&a, &b], MergeParams::uniform(LayerParams::new(2, 8)), 1);
        let xb = Tensor3::zeros(4, 4, 3);
        assert!(matches!(merged_forward(&mm, 0, &xb), Err(Error::LayerShape { layer: 0, .. })));
        assert!(matches!(merged_forward(&mm, 2, &xb), Err(Error::UnknownTask(_))));
        assert!(matches!(econv_forward(&xb, &mm.elayers[0], 5), Err(Error::UnknownTask(_))));

        let mut broken = mm.clone();
        broken.elayers[0].members[0].assign[0] = 99;
        let xa = Tensor3::zeros(4, 4, 2);
        assert!(matches!(
            merged_forward(&broken, 0, &xa),
            Err(Error::CodewordRange { index: 99, count: 8 })
        ));
    }

    #[test]
    fn op_counts_follow_the_cost_structure() {
        let a = tiny_model("a", tiny(4, 3, 4), 1);
        let b = tiny_model("b", tiny(6, 3, 5), 2);
        let mm = merge(&[&a, &b], MergeParams::uniform(LayerParams::new(2, 6)), 1);
        let x = input(&mut rng(1), Shape3::new(4, 4, 6));
        let mut trace = Trace::default();
        let first = merged_forward_with(&mm, 1, &x, &mut Scratch::default(), Some(&mut trace)).unwrap();
        let conv = &trace.layers[0];
        assert!(conv.quantized);
        // N M rho C r table work, then one add per valid (i, j) per tap, segment and kernel
        assert_eq!(conv.ops.table_macs, 4 * 4 * 3 * 6 * 2);
        let valid_taps: u64 = (0..3)
            .flat_map(|a| (0..3).map(move |b| (a, b)))
            .map(|(a, b)| {
                let span = |o: usize| 4 - (o as i64 - 1).unsigned_abs();
                span(a) * span(b)
            })
            .sum();
        assert_eq!(conv.ops.index_adds, valid_taps * 3 * 5);
        let fc = trace.layers.iter().find(|l| l.quantized && l.kind == LayerKind::Fc).unwrap();
        assert_eq!(fc.ops.table_macs, (80 / 2 * 6 * 2) as u64);
        assert_eq!(fc.ops.index_adds, 12 * 40);
        let classifier = trace.layers.iter().rfind(|l| l.kind == LayerKind::Fc).unwrap();
        assert_eq!(classifier.ops.dense_macs, 12 * 3);

        let second = merged_forward_with(&mm, 1, &x, &mut Scratch::default(), None).unwrap();
        assert_eq!(first, second);
    }
}

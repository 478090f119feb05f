//! Dense per-sample forward with cached activations and its reverse pass.

use crate::error::{Error, Result};
use crate::netdef::{apply_layer, Layer};
use crate::tensor::{col2im, gemm, im2col, Tensor3};

/// Activations of one forward pass: `inputs[i]` is the input of layer `i`.
pub(crate) struct Tape {
    pub inputs: Vec<Tensor3>,
    /// Index of the softmax layer; its input holds the logits.
    pub softmax: usize,
}

impl Tape {
    pub fn logits(&self) -> &[f64] {
        self.inputs[self.softmax].data()
    }

    /// Output of layer `i`.
    pub fn output(&self, i: usize) -> &Tensor3 {
        &self.inputs[i + 1]
    }
}

pub(crate) fn forward_tape(layers: &[Layer], x: &Tensor3) -> Result<Tape> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        if let Err(message) = layer.output_shape(cur.shape()) {
            return Err(Error::LayerShape { layer: i, message });
        }
        if matches!(layer, Layer::Softmax) {
            inputs.push(cur);
            return Ok(Tape { inputs, softmax: i });
        }
        let next = apply_layer(layer, cur.clone())?;
        inputs.push(cur);
        cur = next;
    }
    Err(Error::Shape("network has no softmax layer".into()))
}

/// Parameter gradient of one layer, in the layer's own storage layout.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LayerGrad {
    None,
    Weighted { weights: Vec<f64>, bias: Vec<f64> },
}

impl LayerGrad {
    pub fn zeros_for(layer: &Layer) -> Self {
        match layer {
            Layer::Conv(c) => LayerGrad::Weighted {
                weights: vec![0.0; c.kernels.data().len()],
                bias: vec![0.0; c.bias.len()],
            },
            Layer::Fc(f) => LayerGrad::Weighted {
                weights: vec![0.0; f.weights.len()],
                bias: vec![0.0; f.bias.len()],
            },
            _ => LayerGrad::None,
        }
    }

    pub fn add(&mut self, other: &LayerGrad) {
        if let (LayerGrad::Weighted { weights, bias }, LayerGrad::Weighted { weights: w, bias: b }) = (self, other) {
            add_into(weights, w);
            add_into(bias, b);
        }
    }
}

pub(crate) fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Gradient of a conv layer given its input and output gradient:
/// `(d kernels, d bias, d input)`.
pub(crate) fn conv_backward(
    x: &Tensor3,
    kernels: &crate::KernelSet,
    dy: &Tensor3,
    want_dx: bool,
) -> (Vec<f64>, Vec<f64>, Option<Tensor3>) {
    let (px, p, klen) = (x.n_rows() * x.n_cols(), kernels.count(), kernels.kernel_len());
    let mut patches = Vec::new();
    im2col(x, kernels.k_rows(), kernels.k_cols(), &mut patches);
    let mut dk = vec![0.0; p * klen];
    gemm(p, px, klen, dy.data(), (1, p), &patches, (klen, 1), &mut dk, (klen, 1), 0.0);
    let mut db = vec![0.0; p];
    for row in dy.data().chunks_exact(p) {
        add_into(&mut db, row);
    }
    let dx = want_dx.then(|| {
        let mut dpatch = vec![0.0; px * klen];
        gemm(px, p, klen, dy.data(), (p, 1), kernels.data(), (klen, 1), &mut dpatch, (klen, 1), 0.0);
        col2im(&dpatch, x.shape(), kernels.k_rows(), kernels.k_cols())
    });
    (dk, db, dx)
}

/// `(d weights, d bias, d input)` of `y = W x + b`.
pub(crate) fn fc_backward(x: &[f64], fc: &crate::netdef::FcLayer, dy: &[f64], want_dx: bool) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let mut dw = vec![0.0; fc.weights.len()];
    for (o, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            for (d, &xi) in dw[o * fc.n_in..(o + 1) * fc.n_in].iter_mut().zip(x) {
                *d = g * xi;
            }
        }
    }
    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; fc.n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                for (d, &w) in dx.iter_mut().zip(fc.row(o)) {
                    *d += g * w;
                }
            }
        }
        dx
    });
    (dw, dy.to_vec(), dx)
}

fn max_pool_backward(x: &Tensor3, window: usize, stride: usize, dy: &Tensor3) -> Tensor3 {
    let mut dx = Tensor3::zeros(x.n_rows(), x.n_cols(), x.depth());
    for i in 0..dy.n_rows() {
        for j in 0..dy.n_cols() {
            for u in 0..x.depth() {
                // first maximum in scan order receives the gradient
                let mut best = (i * stride, j * stride);
                let mut m = f64::NEG_INFINITY;
                for a in 0..window {
                    for b in 0..window {
                        let v = x.get(i * stride + a, j * stride + b, u);
                        if v > m {
                            m = v;
                            best = (i * stride + a, j * stride + b);
                        }
                    }
                }
                let k = dx.index(best.0, best.1, u);
                dx.data_mut()[k] += dy.get(i, j, u);
            }
        }
    }
    dx
}

/// Reverse pass from `dlogits`. `extra[i]`, when present, is added to the
/// gradient of layer `i`'s output. Returns per-layer parameter gradients
/// and, if requested, the input gradient.
pub(crate) fn backward_tape(
    layers: &[Layer],
    tape: &Tape,
    dlogits: &[f64],
    extra: &[Option<Tensor3>],
    want_dx: bool,
) -> (Vec<LayerGrad>, Option<Tensor3>) {
    let mut grads: Vec<LayerGrad> = vec![LayerGrad::None; layers.len()];
    let logits_shape = tape.inputs[tape.softmax].shape();
    let mut g = Tensor3::from_vec(logits_shape.rows, logits_shape.cols, logits_shape.depth, dlogits.to_vec())
        .expect("logit gradient matches logits");
    for i in (0..tape.softmax).rev() {
        if let Some(Some(e)) = extra.get(i) {
            add_into(g.data_mut(), e.data());
        }
        let x = &tape.inputs[i];
        let need_dx = want_dx || i > 0;
        g = match &layers[i] {
            Layer::Conv(c) => {
                let (dk, db, dx) = conv_backward(x, &c.kernels, &g, need_dx);
                grads[i] = LayerGrad::Weighted { weights: dk, bias: db };
                match dx {
                    Some(dx) => dx,
                    None => break,
                }
            }
            Layer::Fc(f) => {
                let (dw, db, dx) = fc_backward(x.data(), f, g.data(), need_dx);
                grads[i] = LayerGrad::Weighted { weights: dw, bias: db };
                match dx {
                    Some(dx) => Tensor3::vector(dx),
                    None => break,
                }
            }
            Layer::Relu => {
                for (d, &v) in g.data_mut().iter_mut().zip(x.data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                g
            }
            Layer::MaxPool { window, stride } => max_pool_backward(x, *window, *stride, &g),
            Layer::Flatten => {
                let s = x.shape();
                g.reshaped(s.rows, s.cols, s.depth).expect("flatten preserves size")
            }
            Layer::Softmax => g,
        };
    }
    (grads, want_dx.then_some(g))
}

/// Cross-entropy of softmax(logits) against `label` and its logit gradient.
pub(crate) fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut probs = crate::netdef::softmax(logits);
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    probs[label] -= 1.0;
    (loss, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::{Arch, Model};
    use crate::testkit::{input, rng};
    use crate::Shape3;

    fn loss_of(model: &Model, x: &Tensor3, label: usize) -> f64 {
        let tape = forward_tape(&model.layers, x).unwrap();
        cross_entropy(tape.logits(), label).0
    }

    fn params_mut(layer: &mut Layer) -> Option<(&mut [f64], &mut [f64])> {
        match layer {
            Layer::Conv(c) => Some((c.kernels.data_mut(), &mut c.bias)),
            Layer::Fc(f) => Some((&mut f.weights, &mut f.bias)),
            _ => None,
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let arch = Arch::Small { conv: (3, 4), hidden: 6, kernel: 3 };
        let mut model = arch.build("m", Shape3::new(6, 6, 2), 3, 4).unwrap();
        let mut g = rng(11);
        for layer in &mut model.layers {
            if let Some((_, b)) = params_mut(layer) {
                b.iter_mut().for_each(|v| *v = 0.1);
            }
        }
        let x = input(&mut g, model.input_shape);
        let label = 1;
        let tape = forward_tape(&model.layers, &x).unwrap();
        let (_, dlogits) = cross_entropy(tape.logits(), label);
        let (grads, dx) = backward_tape(&model.layers, &tape, &dlogits, &[], true);
        let h = 1e-5;
        for (li, grad) in grads.iter().enumerate() {
            let LayerGrad::Weighted { weights, bias } = grad.clone() else { continue };
            for (which, analytic) in [(0, weights), (1, bias)] {
                for k in (0..analytic.len()).step_by(analytic.len() / 7 + 1) {
                    let mut plus = model.clone();
                    let mut minus = model.clone();
                    let (wp, bp) = params_mut(&mut plus.layers[li]).unwrap();
                    if which == 0 { wp[k] += h } else { bp[k] += h }
                    let (wm, bm) = params_mut(&mut minus.layers[li]).unwrap();
                    if which == 0 { wm[k] -= h } else { bm[k] -= h }
                    let fd = (loss_of(&plus, &x, label) - loss_of(&minus, &x, label)) / (2.0 * h);
                    assert!((fd - analytic[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "layer {li} {which} {k}: {fd} vs {}", analytic[k]);
                }
            }
        }
        let dx = dx.unwrap();
        for k in (0..x.data().len()).step_by(5) {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let fd = (loss_of(&model, &xp, label) - loss_of(&model, &xm, label)) / (2.0 * h);
            assert!((fd - dx.data()[k]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (loss, g) = cross_entropy(&[1.0, 2.0, 3.0], 2);
        assert!(loss > 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        assert!(g[2] < 0.0);
    }
}

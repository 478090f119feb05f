//! Gradients of E-Conv and E-FC layers with frozen assignments.
//!
//! A codeword receives the sum of the dense weight gradients of every
//! kernel segment assigned to it. The input gradient runs through the
//! de-quantized dense weights.

use super::backprop::{conv_backward, fc_backward};
use crate::error::{Error, Result};
use crate::netdef::Layer;
use crate::quantize::{ELayer, EMember};
use crate::tensor::Tensor3;

/// Gradient of one segment's codebook, shaped like its `words`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookGrad {
    /// Index into the layer's `codebooks`.
    pub book: usize,
    pub words: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EConvGrad {
    /// One entry per depth segment of the member, in segment order.
    pub codebooks: Vec<CodebookGrad>,
    pub bias: Vec<f64>,
    pub dx: Tensor3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EFcGrad {
    pub codebooks: Vec<CodebookGrad>,
    pub bias: Vec<f64>,
    pub dx: Vec<f64>,
}

/// Adds the dense weight gradient `dw` of `member` onto per-segment
/// codeword gradients.
pub(crate) fn scatter_weight_grad(layer: &ELayer, member: &EMember, dw: &[f64], out: &mut [CodebookGrad]) {
    let r = layer.r();
    let rho = member.segments();
    let d = member.geometry.depth();
    for q in 0..member.geometry.vectors_per_segment() {
        let row = &dw[q * d..(q + 1) * d];
        for (v, g) in out.iter_mut().enumerate().take(rho) {
            let c = member.assign[q * rho + v] as usize;
            let start = v * r;
            let end = (start + r).min(d);
            for (acc, w) in g.words[c * r..c * r + (end - start)].iter_mut().zip(&row[start..end]) {
                *acc += w;
            }
        }
    }
}

pub(crate) fn zero_codebook_grads(layer: &ELayer, member: &EMember) -> Vec<CodebookGrad> {
    member
        .books
        .iter()
        .map(|&book| CodebookGrad {
            book,
            words: vec![0.0; layer.codebooks[book].words.len()],
        })
        .collect()
}

fn resolve(layer: &ELayer, task: usize) -> Result<(usize, Layer)> {
    let mi = layer
        .members
        .iter()
        .position(|m| m.task == task)
        .ok_or_else(|| Error::UnknownTask(format!("task {task} in layer `{}`", layer.name)))?;
    Ok((mi, layer.dequantized(mi)?))
}

/// Backward pass of an E-Conv layer for `task` at input `x`.
pub fn econv_backward(x: &Tensor3, layer: &ELayer, task: usize, dy: &Tensor3) -> Result<EConvGrad> {
    let (mi, dense) = resolve(layer, task)?;
    let Layer::Conv(conv) = dense else {
        return Err(Error::Shape(format!("layer `{}` is not a conv layer", layer.name)));
    };
    if x.depth() != conv.kernels.depth() {
        return Err(Error::Shape(format!("layer `{}` expects depth {}, input is {}", layer.name, conv.kernels.depth(), x.shape())));
    }
    let want = crate::Shape3::new(x.n_rows(), x.n_cols(), conv.kernels.count());
    if dy.shape() != want {
        return Err(Error::Shape(format!("output gradient is {}, expected {want}", dy.shape())));
    }
    let (dk, bias, dx) = conv_backward(x, &conv.kernels, dy, true);
    let member = &layer.members[mi];
    let mut codebooks = zero_codebook_grads(layer, member);
    scatter_weight_grad(layer, member, &dk, &mut codebooks);
    Ok(EConvGrad {
        codebooks,
        bias,
        dx: dx.expect("requested"),
    })
}

/// Backward pass of an E-FC layer for `task` at input `x`.
pub fn efc_backward(x: &[f64], layer: &ELayer, task: usize, dy: &[f64]) -> Result<EFcGrad> {
    let (mi, dense) = resolve(layer, task)?;
    let Layer::Fc(fc) = dense else {
        return Err(Error::Shape(format!("layer `{}` is not an fc layer", layer.name)));
    };
    if x.len() != fc.n_in || dy.len() != fc.n_out {
        return Err(Error::Shape(format!(
            "layer `{}` maps {} to {}, got input {} and output gradient {}",
            layer.name,
            fc.n_in,
            fc.n_out,
            x.len(),
            dy.len()
        )));
    }
    let (dw, bias, dx) = fc_backward(x, &fc, dy, true);
    let member = &layer.members[mi];
    let mut codebooks = zero_codebook_grads(layer, member);
    scatter_weight_grad(layer, member, &dw, &mut codebooks);
    Ok(EFcGrad {
        codebooks,
        bias,
        dx: dx.expect("requested"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::einfer::{econv_forward, efc_forward};
    use crate::quantize::{LayerParams, MergeParams, MergedModel};
    use crate::testkit::{input, merge, rng, tiny_model, uniform, Tiny};
    use crate::Shape3;

    fn tiny(rows: usize, depth: usize, kernel: usize, kernels: usize) -> Tiny {
        Tiny {
            rows,
            cols: rows,
            depth,
            kernel,
            kernels,
            hidden: 16,
            classes: 3,
        }
    }

    fn conv_pair(seed: u64) -> MergedModel {
        // 4x4 spatial, d = 4, r = 2, C = 4
        let a = tiny_model("a", tiny(4, 4, 3, 3), seed);
        let b = tiny_model("b", tiny(4, 4, 3, 2), seed + 50);
        merge(&[&a, &b], MergeParams::uniform(LayerParams::new(2, 4)), seed)
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn close(fd: f64, an: f64) -> bool {
        (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6)
    }

    #[test]
    fn econv_gradients_match_finite_differences() {
        let h = 1e-5;
        for seed in 0..3 {
            let mm = conv_pair(seed);
            let mut g = rng(seed + 7);
            for task in 0..2 {
                let layer = &mm.elayers[0];
                let p = layer.member_for(task).unwrap().geometry.outputs();
                let x = input(&mut g, Shape3::new(4, 4, 4));
                let dy = input(&mut g, Shape3::new(4, 4, p));
                let loss = |l: &ELayer, x: &Tensor3| dot(econv_forward(x, l, task).unwrap().data(), dy.data());
                let grad = econv_backward(&x, layer, task, &dy).unwrap();
                for cg in &grad.codebooks {
                    for k in 0..cg.words.len() {
                        let mut lp = layer.clone();
                        lp.codebooks[cg.book].words[k] += h;
                        let mut lm = layer.clone();
                        lm.codebooks[cg.book].words[k] -= h;
                        let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
                        assert!(close(fd, cg.words[k]), "book {} entry {k}: {fd} vs {}", cg.book, cg.words[k]);
                    }
                }
                let mi = layer.members.iter().position(|m| m.task == task).unwrap();
                for k in 0..p {
                    let mut lp = layer.clone();
                    lp.members[mi].bias[k] += h;
                    let mut lm = layer.clone();
                    lm.members[mi].bias[k] -= h;
                    assert!(close((loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h), grad.bias[k]));
                }
                for k in 0..x.data().len() {
                    let mut xp = x.clone();
                    xp.data_mut()[k] += h;
                    let mut xm = x.clone();
                    xm.data_mut()[k] -= h;
                    assert!(close((loss(layer, &xp) - loss(layer, &xm)) / (2.0 * h), grad.dx.data()[k]));
                }
            }
        }
    }

    #[test]
    fn efc_gradients_match_finite_differences() {
        let h = 1e-5;
        let a = tiny_model("a", tiny(2, 2, 1, 3), 1);
        let b = tiny_model("b", tiny(2, 2, 1, 5), 2);
        let params = MergeParams::uniform(LayerParams::new(3, 6)).with("conv1", LayerParams::new(2, 4));
        let mm = merge(&[&a, &b], params, 1);
        let layer = &mm.elayers[1];
        let mut g = rng(3);
        for task in 0..2 {
            let n_in = [12, 20][task];
            let x = uniform(&mut g, n_in);
            let dy = uniform(&mut g, 16);
            let loss = |l: &ELayer, x: &[f64]| dot(&efc_forward(x, l, task).unwrap(), &dy);
            let grad = efc_backward(&x, layer, task, &dy).unwrap();
            assert_eq!(grad.bias, dy);
            for cg in &grad.codebooks {
                for k in 0..cg.words.len() {
                    let mut lp = layer.clone();
                    lp.codebooks[cg.book].words[k] += h;
                    let mut lm = layer.clone();
                    lm.codebooks[cg.book].words[k] -= h;
                    assert!(close((loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h), cg.words[k]));
                }
            }
            for k in 0..n_in {
                let mut xp = x.clone();
                xp[k] += h;
                let mut xm = x.clone();
                xm[k] -= h;
                assert!(close((loss(layer, &xp) - loss(layer, &xm)) / (2.0 * h), grad.dx[k]));
            }
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let mm = conv_pair(0);
        let layer = &mm.elayers[0];
        let x = input(&mut rng(1), Shape3::new(4, 4, 4));
        let grad = econv_backward(&x, layer, 0, &Tensor3::zeros(4, 4, 3)).unwrap();
        assert!(grad.codebooks.iter().all(|c| c.words.iter().all(|&w| w == 0.0)));
        assert!(grad.bias.iter().all(|&b| b == 0.0));
        assert!(grad.dx.data().iter().all(|&v| v == 0.0));
        let fc = &mm.elayers[1];
        let grad = efc_backward(&vec![1.0; 48], fc, 0, &[0.0; 16]).unwrap();
        assert!(grad.codebooks.iter().all(|c| c.words.iter().all(|&w| w == 0.0)));
    }

    #[test]
    fn single_location_single_codeword() {
        // 1x1 kernel, one segment, one codeword, 1x1 spatial: dPhi = dy * x
        let t = Tiny {
            rows: 1,
            cols: 1,
            depth: 3,
            kernel: 1,
            kernels: 1,
            hidden: 2,
            classes: 2,
        };
        let a = tiny_model("a", t, 1);
        let b = tiny_model("b", t, 2);
        let params = MergeParams::uniform(LayerParams::lossless(1)).with("conv1", LayerParams::new(3, 1));
        let mm = merge(&[&a, &b], params, 1);
        let x = Tensor3::from_vec(1, 1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let grad = econv_backward(&x, &mm.elayers[0], 0, &Tensor3::vector(vec![3.0])).unwrap();
        assert_eq!(grad.codebooks[0].words, vec![1.5, -3.0, 6.0]);

        let fc_x = [4.0];
        let t1 = Tiny { depth: 1, hidden: 1, ..t };
        let (a, b) = (tiny_model("a", t1, 3), tiny_model("b", t1, 4));
        let mm = merge(&[&a, &b], MergeParams::uniform(LayerParams::lossless(1)), 1);
        let grad = efc_backward(&fc_x, &mm.elayers[1], 1, &[-2.0]).unwrap();
        assert_eq!(grad.codebooks[0].words.iter().sum::<f64>(), -8.0);
    }

    #[test]
    fn mismatched_gradient_shape_is_an_error() {
        let mm = conv_pair(0);
        let x = Tensor3::zeros(4, 4, 4);
        assert!(econv_backward(&x, &mm.elayers[0], 0, &Tensor3::zeros(4, 4, 2)).is_err());
        assert!(matches!(econv_backward(&x, &mm.elayers[0], 9, &Tensor3::zeros(4, 4, 3)), Err(Error::UnknownTask(_))));
    }
}

//! Small random models shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::default_plan;
use crate::netdef::{ConvLayer, FcLayer, Layer, Model};
use crate::quantize::{build_merged, KMeansConfig, MergeParams, MergedModel};
use crate::tensor::{KernelSet, Shape3, Tensor3};

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub(crate) fn input(rng: &mut ChaCha8Rng, s: Shape3) -> Tensor3 {
    Tensor3::from_vec(s.rows, s.cols, s.depth, uniform(rng, s.len())).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Tiny {
    pub rows: usize,
    pub cols: usize,
    pub depth: usize,
    pub kernel: usize,
    pub kernels: usize,
    pub hidden: usize,
    pub classes: usize,
}

/// `conv - relu - flatten - fc - relu - fc - softmax` with uniform weights.
pub(crate) fn tiny_model(name: &str, t: Tiny, seed: u64) -> Model {
    let mut r = rng(seed);
    let k = t.kernel;
    let fan = (k * k * t.depth) as f64;
    let conv = KernelSet::new(
        t.kernels,
        k,
        k,
        t.depth,
        uniform(&mut r, t.kernels * k * k * t.depth).iter().map(|w| w / fan.sqrt()).collect(),
    )
    .unwrap();
    let flat = t.rows * t.cols * t.kernels;
    let fc = |r: &mut ChaCha8Rng, n_in: usize, n_out: usize| {
        let s = (n_in as f64).sqrt();
        let w = uniform(r, n_in * n_out).iter().map(|w| w / s).collect();
        Layer::Fc(FcLayer::new(n_in, n_out, w, uniform(r, n_out)).unwrap())
    };
    let layers = vec![
        Layer::Conv(ConvLayer {
            kernels: conv,
            bias: uniform(&mut r, t.kernels),
        }),
        Layer::Relu,
        Layer::Flatten,
        fc(&mut r, flat, t.hidden),
        Layer::Relu,
        fc(&mut r, t.hidden, t.classes),
        Layer::Softmax,
    ];
    let m = Model {
        name: name.into(),
        input_shape: Shape3::new(t.rows, t.cols, t.depth),
        classes: t.classes,
        layers,
        provenance: None,
    };
    m.validate().unwrap();
    m
}

pub(crate) fn merge(models: &[&Model], params: MergeParams, seed: u64) -> MergedModel {
    let plan = default_plan(models).unwrap();
    let cfg = KMeansConfig {
        restarts: 2,
        max_iters: 20,
        seed,
        ..KMeansConfig::default()
    };
    build_merged(models, &plan, &params, &cfg).unwrap()
}

/// Relative error `|a - b| / max(1, |b|)`, maximised over entries.
pub(crate) fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

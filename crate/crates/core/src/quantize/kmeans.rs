//! Multi-restart Lloyd k-means with k-means++ seeding.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop once an iteration improves the error by less than this fraction.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

/// Error trace of one restart: the sum of squared distances after every
/// assignment step. Never increases.
#[derive(Debug, Clone, PartialEq)]
pub struct RestartLog {
    pub seed: u64,
    pub history: Vec<f64>,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub dim: usize,
    /// Codewords, `count x dim`, one contiguous row per codeword.
    pub centroids: Vec<f64>,
    pub assignments: Vec<u32>,
    /// Sum of squared distances of every vector to its codeword.
    pub error: f64,
    pub restarts: Vec<RestartLog>,
    /// Set when the requested count reached the number of distinct vectors
    /// and the distinct vectors themselves were returned.
    pub lossless: bool,
}

impl KMeansResult {
    pub fn count(&self) -> usize {
        self.centroids.len() / self.dim
    }
}

/// Derives an independent stream seed; equal inputs give equal seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = splitmix(z ^ splitmix(p.wrapping_add(0x2545_F491_4F6C_DD1D)));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest codeword of `v`; the lowest index wins ties.
#[inline]
pub fn nearest(v: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, word) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(v, word);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Bit pattern key; `-0.0` and `0.0` are the same vector.
fn key(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| if *x == 0.0 { 0 } else { x.to_bits() }).collect()
}

/// Distinct vectors in first-occurrence order, and each vector's class.
fn distinct(data: &[f64], dim: usize) -> (Vec<f64>, Vec<u32>) {
    let mut index: HashMap<Vec<u64>, u32> = HashMap::new();
    let mut words = Vec::new();
    let mut assignments = Vec::with_capacity(data.len() / dim);
    for v in data.chunks_exact(dim) {
        let next = index.len() as u32;
        let id = *index.entry(key(v)).or_insert_with(|| {
            words.extend_from_slice(v);
            next
        });
        assignments.push(id);
    }
    (words, assignments)
}

/// Clusters `data` (rows of length `dim`) into at most `k` codewords and
/// keeps the restart with the smallest error (earliest restart on ties).
///
/// When `k` reaches the number of distinct vectors the distinct vectors are
/// returned directly and the error is zero.
pub fn kmeans(data: &[f64], dim: usize, k: usize, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
        return Err(Error::KMeans(format!(
            "need a non-empty set of {dim}-dimensional vectors, got {} values",
            data.len()
        )));
    }
    if k == 0 {
        return Err(Error::KMeans("codeword count must be at least 1".into()));
    }
    let (words, classes) = distinct(data, dim);
    if k >= words.len() / dim {
        return Ok(KMeansResult {
            dim,
            centroids: words,
            assignments: classes,
            error: 0.0,
            restarts: vec![RestartLog {
                seed: cfg.seed,
                history: vec![0.0],
                error: 0.0,
            }],
            lossless: true,
        });
    }
    let restarts = cfg.restarts.max(1);
    let runs: Vec<(Vec<f64>, Vec<u32>, RestartLog)> = (0..restarts)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, &[i as u64]);
            lloyd(data, dim, k, cfg, seed)
        })
        .collect();
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.2.error < runs[best].2.error {
            best = i;
        }
    }
    let logs: Vec<RestartLog> = runs.iter().map(|r| r.2.clone()).collect();
    let (centroids, assignments, log) = runs.into_iter().nth(best).expect("at least one restart");
    Ok(KMeansResult {
        dim,
        centroids,
        assignments,
        error: log.error,
        restarts: logs,
        lossless: false,
    })
}

fn plus_plus_init(data: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = data
        .chunks_exact(dim)
        .map(|v| sq_dist(v, &centroids[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // floating round-off can land on a zero-weight tail
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|w| *w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let word = data[pick * dim..(pick + 1) * dim].to_vec();
        for (i, v) in data.chunks_exact(dim).enumerate() {
            d2[i] = d2[i].min(sq_dist(v, &word));
        }
        centroids.extend_from_slice(&word);
    }
    centroids
}

fn assign(data: &[f64], dim: usize, centroids: &[f64], out: &mut [u32], dist: &mut [f64]) -> f64 {
    let mut error = 0.0;
    for (i, v) in data.chunks_exact(dim).enumerate() {
        let (c, d) = nearest(v, centroids, dim);
        out[i] = c as u32;
        dist[i] = d;
        error += d;
    }
    error
}

/// Means of the assigned vectors; empty clusters are moved onto the vectors
/// farthest from their current codeword.
fn update(data: &[f64], dim: usize, k: usize, assignments: &[u32], dist: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (v, &c) in data.chunks_exact(dim).zip(assignments) {
        let c = c as usize;
        counts[c] += 1;
        for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(v) {
            *s += x;
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        let mut order: Vec<usize> = (0..dist.len()).collect();
        // farthest first, lowest index among equals
        order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        for (slot, &c) in empty.iter().enumerate() {
            let p = order[slot];
            sums[c * dim..(c + 1) * dim].copy_from_slice(&data[p * dim..(p + 1) * dim]);
            counts[c] = 1;
        }
    }
    for c in 0..k {
        let inv = 1.0 / counts[c] as f64;
        for s in &mut sums[c * dim..(c + 1) * dim] {
            *s *= inv;
        }
    }
    sums
}

fn lloyd(
    data: &[f64],
    dim: usize,
    k: usize,
    cfg: &KMeansConfig,
    seed: u64,
) -> (Vec<f64>, Vec<u32>, RestartLog) {
    let n = data.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, dim, k, &mut rng);
    let mut assignments = vec![0u32; n];
    let mut dist = vec![0.0; n];
    let mut error = assign(data, dim, &centroids, &mut assignments, &mut dist);
    let mut history = vec![error];
    for _ in 0..cfg.max_iters {
        let next = update(data, dim, k, &assignments, &dist);
        let mut next_assign = vec![0u32; n];
        let mut next_dist = vec![0.0; n];
        let next_error = assign(data, dim, &next, &mut next_assign, &mut next_dist);
        if next_error > error {
            // only round-off can do this; keep the better state
            break;
        }
        let improvement = error - next_error;
        centroids = next;
        assignments = next_assign;
        dist = next_dist;
        error = next_error;
        history.push(error);
        if improvement <= cfg.tol * error.max(f64::MIN_POSITIVE) || error == 0.0 {
            break;
        }
    }
    (
        centroids,
        assignments,
        RestartLog {
            seed,
            history,
            error,
        },
    )
}

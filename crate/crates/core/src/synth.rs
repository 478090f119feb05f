//! Procedural image-classification tasks for offline experiments.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netdef::{Dataset, Split};
use crate::quantize::derive_seed;
use crate::tensor::{Shape3, Tensor3};

/// Pattern family of a 4-class task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Bar orientation: horizontal, vertical, diagonal, anti-diagonal.
    Bars,
    /// Shape: square outline, disk, plus sign, ring.
    Shapes,
    /// Grating: coarse or fine, horizontal or vertical, random phase.
    Waves,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Bars, Family::Shapes, Family::Waves];

    pub fn name(self) -> &'static str {
        match self {
            Family::Bars => "bars",
            Family::Shapes => "shapes",
            Family::Waves => "waves",
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown synthetic family `{s}` (bars, shapes, waves)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub shape: Shape3,
    pub train: usize,
    pub test: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shape: Shape3::new(16, 16, 4),
            train: 2000,
            test: 500,
            noise: 0.15,
            seed: 0,
        }
    }
}

pub const CLASSES: usize = 4;

fn pattern(family: Family, class: usize, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![0.0; rows * cols];
    let (fr, fc) = (rows as f64, cols as f64);
    match family {
        Family::Bars => {
            let width = rng.random_range(1.0..2.5);
            let offset = rng.random_range(-0.25..0.25) * fr.min(fc);
            let (ci, cj) = (fr / 2.0 + offset, fc / 2.0 - offset);
            for i in 0..rows {
                for j in 0..cols {
                    let (y, x) = (i as f64 - ci, j as f64 - cj);
                    let dist = match class {
                        0 => y.abs(),
                        1 => x.abs(),
                        2 => (y - x).abs() / 2f64.sqrt(),
                        _ => (y + x).abs() / 2f64.sqrt(),
                    };
                    img[i * cols + j] = f64::from(dist < width);
                }
            }
        }
        Family::Shapes => {
            let size = rng.random_range(0.22..0.32) * fr.min(fc);
            let ci = rng.random_range(size..fr - size);
            let cj = rng.random_range(size..fc - size);
            for i in 0..rows {
                for j in 0..cols {
                    let (y, x) = (i as f64 - ci, j as f64 - cj);
                    let r = (y * y + x * x).sqrt();
                    let on = match class {
                        0 => {
                            let m = y.abs().max(x.abs());
                            m <= size && m > size - 1.2
                        }
                        1 => r <= size * 0.8,
                        2 => (y.abs() < 1.0 && x.abs() <= size) || (x.abs() < 1.0 && y.abs() <= size),
                        _ => (r - size * 0.8).abs() < 0.8,
                    };
                    img[i * cols + j] = f64::from(on);
                }
            }
        }
        Family::Waves => {
            let period = if class.is_multiple_of(2) { 8.0 } else { 3.0 };
            let phase = rng.random_range(0.0..2.0 * PI);
            for i in 0..rows {
                for j in 0..cols {
                    let t = if class < 2 { i } else { j } as f64;
                    img[i * cols + j] = 0.5 + 0.5 * (2.0 * PI * t / period + phase).sin();
                }
            }
        }
    }
    img
}

fn sample(family: Family, class: usize, shape: Shape3, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Tensor3 {
    let base = pattern(family, class, shape.rows, shape.cols, rng);
    let gains: Vec<f64> = (0..shape.depth).map(|_| rng.random_range(0.5..1.0)).collect();
    let mut x = Tensor3::zeros(shape.rows, shape.cols, shape.depth);
    for (px, &v) in base.iter().enumerate() {
        for (u, g) in gains.iter().enumerate() {
            x.data_mut()[px * shape.depth + u] = v * g + noise.sample(rng);
        }
    }
    x
}

/// Balanced split of a family's task. Train and test draw from disjoint
/// random streams.
pub fn generate(family: Family, split: Split, cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.shape.rows < 8 || cfg.shape.cols < 8 || cfg.shape.depth == 0 {
        return Err(Error::Dataset(format!("synthetic images need at least 8x8x1, got {}", cfg.shape)));
    }
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Dataset(format!("noise {}: {e}", cfg.noise)))?;
    let (count, stream) = match split {
        Split::Train => (cfg.train, 0),
        Split::Test => (cfg.test, 1),
    };
    let family_id = Family::ALL.iter().position(|&f| f == family).expect("listed") as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[family_id, stream]));
    let labels: Vec<usize> = (0..count).map(|k| k % CLASSES).collect();
    let images = labels.iter().map(|&c| sample(family, c, cfg.shape, &noise, &mut rng)).collect();
    Dataset::new(images, labels, split, CLASSES)
}

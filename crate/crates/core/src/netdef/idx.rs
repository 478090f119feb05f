//! IDX (MNIST-family) image and label files.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor3};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor3>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor3>, labels: Vec<usize>, split: Split, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {bad} outside [0, {classes})")));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(Error::Dataset("images have differing shapes".into()));
            }
        }
        Ok(Self {
            images,
            labels,
            split,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<Shape3> {
        self.images.first().map(Tensor3::shape)
    }

    /// A seeded random subset holding `ceil(fraction * len)` items.
    pub fn fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("data fraction {fraction} outside (0, 1]")));
        }
        let keep = ((self.len() as f64 * fraction).ceil() as usize).min(self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(keep);
        order.sort_unstable();
        Ok(self.select(&order))
    }

    /// Splits off the last `count` items, returning `(head, tail)`.
    pub fn split_tail(&self, count: usize) -> (Self, Self) {
        let cut = self.len().saturating_sub(count);
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            classes: self.classes,
        }
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]`; the class
/// count is one past the largest label seen.
pub fn load_idx_dataset(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;

    match read_u32_be(&img, 0) {
        Some(IMAGES_MAGIC) => {}
        other => {
            return Err(Error::Dataset(format!(
                "{}: bad image magic {other:#010x?}",
                images_path.display()
            )))
        }
    }
    match read_u32_be(&lab, 0) {
        Some(LABELS_MAGIC) => {}
        other => {
            return Err(Error::Dataset(format!(
                "{}: bad label magic {other:#010x?}",
                labels_path.display()
            )))
        }
    }
    let header = |bytes: &[u8], off: usize, path: &Path| {
        read_u32_be(bytes, off)
            .map(|v| v as usize)
            .ok_or_else(|| Error::Dataset(format!("{}: truncated header", path.display())))
    };
    let count = header(&img, 4, images_path)?;
    let rows = header(&img, 8, images_path)?;
    let cols = header(&img, 12, images_path)?;
    let label_count = header(&lab, 4, labels_path)?;
    if count != label_count {
        return Err(Error::Dataset(format!(
            "count mismatch: {count} images vs {label_count} labels"
        )));
    }
    let pixels = rows * cols;
    let body = &img[16..];
    if body.len() < count * pixels {
        return Err(Error::Dataset(format!("{}: truncated image data", images_path.display())));
    }
    let label_bytes = &lab[8..];
    if label_bytes.len() < count {
        return Err(Error::Dataset(format!("{}: truncated label data", labels_path.display())));
    }
    let images = body
        .chunks_exact(pixels.max(1))
        .take(count)
        .map(|chunk| {
            let data = chunk.iter().map(|&p| f64::from(p) / 255.0).collect();
            Tensor3::from_vec(rows, cols, 1, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = label_bytes[..count].iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(images, labels, split, classes)
}

/// Writes single-channel images as an IDX3 file; values are clamped to
/// `[0, 1]` and rounded to bytes.
pub fn write_idx_images(path: impl AsRef<Path>, images: &[Tensor3]) -> Result<()> {
    let path = path.as_ref();
    let (rows, cols) = images.first().map_or((0, 0), |t| (t.n_rows(), t.n_cols()));
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for v in [images.len(), rows, cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    for im in images {
        if im.depth() != 1 || im.n_rows() != rows || im.n_cols() != cols {
            return Err(Error::Dataset("IDX images must share one single-channel shape".into()));
        }
        out.extend(im.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let byte = u8::try_from(l).map_err(|_| Error::Dataset(format!("label {l} exceeds a byte")))?;
        out.push(byte);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_recovers_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<Tensor3> = (0..5)
            .map(|k| {
                let data = (0..12).map(|p| ((k * 12 + p) % 256) as f64 / 255.0).collect();
                Tensor3::from_vec(3, 4, 1, data).unwrap()
            })
            .collect();
        let labels = vec![0, 3, 1, 2, 3];
        write_idx_images(dir.path().join("im"), &images).unwrap();
        write_idx_labels(dir.path().join("lb"), &labels).unwrap();
        let ds = load_idx_dataset(dir.path().join("im"), dir.path().join("lb"), Split::Train).unwrap();
        assert_eq!(ds.labels, labels);
        assert_eq!(ds.images, images);
        assert_eq!(ds.classes, 4);
    }

    #[test]
    fn empty_file_is_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("im"), []).unwrap();
        write_idx_labels(dir.path().join("lb"), &[0]).unwrap();
        let err = load_idx_dataset(dir.path().join("im"), dir.path().join("lb"), Split::Test).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let im = Tensor3::zeros(2, 2, 1);
        write_idx_images(dir.path().join("im"), &[im.clone(), im]).unwrap();
        write_idx_labels(dir.path().join("lb"), &[0]).unwrap();
        let err = load_idx_dataset(dir.path().join("im"), dir.path().join("lb"), Split::Test).unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{err}");
    }

    #[test]
    fn fraction_keeps_ceil_share() {
        let images = vec![Tensor3::zeros(1, 1, 1); 10];
        let ds = Dataset::new(images, (0..10).map(|i| i % 2).collect(), Split::Train, 2).unwrap();
        assert_eq!(ds.fraction(0.25, 3).unwrap().len(), 3);
        assert_eq!(ds.fraction(1.0, 3).unwrap().len(), 10);
        assert!(ds.fraction(0.0, 3).is_err());
    }
}

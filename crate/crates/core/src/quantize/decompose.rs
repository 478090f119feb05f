use crate::error::{Error, Result};
use crate::tensor::KernelSet;

/// The `1 x 1 x d` kernels sitting at one spatial offset of a kernel set.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGroup {
    /// Signed row offset in `-w..=w`.
    pub i0: isize,
    /// Signed column offset in `-h..=h`.
    pub j0: isize,
    pub kernels: KernelSet,
}

/// Splits `n x m x d` kernels into `n * m` groups of `1 x 1 x d` kernels,
/// one per spatial offset, in row-major offset order.
///
/// Summing `shift(conv(x, group), -i0, -j0)` over all groups reproduces the
/// original convolution.
pub fn decompose_spatial(k: &KernelSet) -> Result<Vec<SpatialGroup>> {
    if k.k_rows().is_multiple_of(2) || k.k_cols().is_multiple_of(2) {
        return Err(Error::Unsupported(format!(
            "spatial decomposition needs odd kernel sizes, got {}x{}",
            k.k_rows(),
            k.k_cols()
        )));
    }
    let (w, h) = (k.half_rows() as isize, k.half_cols() as isize);
    let d = k.depth();
    let mut groups = Vec::with_capacity(k.k_rows() * k.k_cols());
    for a in 0..k.k_rows() {
        for b in 0..k.k_cols() {
            let mut data = Vec::with_capacity(k.count() * d);
            for t in 0..k.count() {
                data.extend_from_slice(k.tap(t, a, b));
            }
            groups.push(SpatialGroup {
                i0: a as isize - w,
                j0: b as isize - h,
                kernels: KernelSet::new(k.count(), 1, 1, d, data)?,
            });
        }
    }
    Ok(groups)
}

/// Number of length-`r` segments covering `d` values.
pub fn segment_count(d: usize, r: usize) -> usize {
    d.div_ceil(r)
}

/// Cuts `values` into `ceil(d / r)` segments of length `r`, zero-padding the last.
pub fn segment_depth(values: &[f64], r: usize) -> Result<Vec<Vec<f64>>> {
    if r == 0 {
        return Err(Error::Config("segment length r must be at least 1".into()));
    }
    Ok(values
        .chunks(r)
        .map(|chunk| {
            let mut seg = chunk.to_vec();
            seg.resize(r, 0.0);
            seg
        })
        .collect())
}

/// Inverse of [`segment_depth`]: concatenates and drops the padding.
pub fn join_segments(segments: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut out: Vec<f64> = segments.iter().flatten().copied().collect();
    out.truncate(d);
    out
}

/// Writes segment `v` of `values` (zero-padded) into `out`.
#[inline]
pub(crate) fn copy_segment(values: &[f64], v: usize, r: usize, out: &mut [f64]) {
    let start = v * r;
    let end = (start + r).min(values.len());
    let n = end.saturating_sub(start);
    out[..n].copy_from_slice(&values[start..end]);
    out[n..r].fill(0.0);
}

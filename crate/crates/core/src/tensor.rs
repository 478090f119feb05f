//! Dense activation volumes, kernel sets and the reference convolutions.
//!
//! Volumes are stored row-major with the channel as the fastest-varying axis,
//! so element `(i, j, u)` of an `N x M x d` volume lives at `(i * M + j) * d + u`.
//! A depth segment of a pixel is therefore a contiguous slice.
//!
//! Convolutions follow the usual CNN convention (cross-correlation), zero
//! "same" padding and stride 1:
//!
//! ```text
//! y(i, j, t) = bias[t] + sum_{i0, j0, u} x(i + i0, j + j0, u) * g_t(i0, j0, u)
//! ```
//!
//! with `i0 in -w..=w`, `j0 in -h..=h`, `w = (n - 1) / 2`, `h = (m - 1) / 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial rows, spatial columns and depth of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub rows: usize,
    pub cols: usize,
    pub depth: usize,
}

impl Shape3 {
    pub const fn new(rows: usize, cols: usize, depth: usize) -> Self {
        Self { rows, cols, depth }
    }

    pub const fn len(&self) -> usize {
        self.rows * self.cols * self.depth
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.rows, self.cols, self.depth)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: Shape3,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(rows: usize, cols: usize, depth: usize) -> Self {
        Self {
            shape: Shape3::new(rows, cols, depth),
            data: vec![0.0; rows * cols * depth],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape3::new(rows, cols, depth);
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{shape} volume needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// A `1 x 1 x len` volume, the carrier for fully-connected activations.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            shape: Shape3::new(1, 1, n),
            data,
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }
    pub fn n_rows(&self) -> usize {
        self.shape.rows
    }
    pub fn n_cols(&self) -> usize {
        self.shape.cols
    }
    pub fn depth(&self) -> usize {
        self.shape.depth
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, u: usize) -> usize {
        (i * self.shape.cols + j) * self.shape.depth + u
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, u: usize) -> f64 {
        self.data[self.index(i, j, u)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, u: usize, value: f64) {
        let k = self.index(i, j, u);
        self.data[k] = value;
    }

    /// The depth vector at pixel `(i, j)`.
    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let start = self.index(i, j, 0);
        &self.data[start..start + self.shape.depth]
    }

    /// Same data viewed as `rows x cols x depth`; the element count must match.
    pub fn reshaped(self, rows: usize, cols: usize, depth: usize) -> Result<Self> {
        Self::from_vec(rows, cols, depth, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `p` kernels of spatial size `n x m` (both odd) over `d` input channels.
///
/// Kernel `t` at spatial offset row `a`, column `b` (0-based, centre at
/// `(w, h)`) and channel `u` is stored at `((t * n + a) * m + b) * d + u`,
/// so every `1 x 1 x d` sub-kernel is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    count: usize,
    k_rows: usize,
    k_cols: usize,
    depth: usize,
    data: Vec<f64>,
}

impl KernelSet {
    pub fn new(
        count: usize,
        k_rows: usize,
        k_cols: usize,
        depth: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if k_rows.is_multiple_of(2) || k_cols.is_multiple_of(2) {
            return Err(Error::Unsupported(format!(
                "kernel size {k_rows}x{k_cols}: only odd spatial sizes are supported"
            )));
        }
        if count == 0 || depth == 0 {
            return Err(Error::Shape("kernel set needs p >= 1 and d >= 1".into()));
        }
        let expected = count * k_rows * k_cols * depth;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{count} kernels of {k_rows}x{k_cols}x{depth} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            count,
            k_rows,
            k_cols,
            depth,
            data,
        })
    }

    pub fn zeros(count: usize, k_rows: usize, k_cols: usize, depth: usize) -> Result<Self> {
        Self::new(
            count,
            k_rows,
            k_cols,
            depth,
            vec![0.0; count * k_rows * k_cols * depth],
        )
    }

    pub fn count(&self) -> usize {
        self.count
    }
    pub fn k_rows(&self) -> usize {
        self.k_rows
    }
    pub fn k_cols(&self) -> usize {
        self.k_cols
    }
    pub fn depth(&self) -> usize {
        self.depth
    }
    /// Vertical half-width `w = (n - 1) / 2`.
    pub fn half_rows(&self) -> usize {
        (self.k_rows - 1) / 2
    }
    /// Horizontal half-width `h = (m - 1) / 2`.
    pub fn half_cols(&self) -> usize {
        (self.k_cols - 1) / 2
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    /// Number of coefficients in one kernel (`n * m * d`).
    pub fn kernel_len(&self) -> usize {
        self.k_rows * self.k_cols * self.depth
    }

    #[inline]
    pub fn index(&self, t: usize, a: usize, b: usize, u: usize) -> usize {
        ((t * self.k_rows + a) * self.k_cols + b) * self.depth + u
    }

    #[inline]
    pub fn get(&self, t: usize, a: usize, b: usize, u: usize) -> f64 {
        self.data[self.index(t, a, b, u)]
    }

    /// The `1 x 1 x d` sub-kernel of kernel `t` at offset row `a`, column `b`.
    pub fn tap(&self, t: usize, a: usize, b: usize) -> &[f64] {
        let s = self.index(t, a, b, 0);
        &self.data[s..s + self.depth]
    }
}

fn check_conv_args(x: &Tensor3, k: &KernelSet, bias: &[f64]) -> Result<()> {
    if x.depth() != k.depth() {
        return Err(Error::Shape(format!(
            "input depth {} does not match kernel depth {}",
            x.depth(),
            k.depth()
        )));
    }
    if bias.len() != k.count() {
        return Err(Error::Shape(format!(
            "bias length {} does not match kernel count {}",
            bias.len(),
            k.count()
        )));
    }
    Ok(())
}

/// Valid output-row range `[lo, hi)` for a tap at signed offset `off`: rows
/// `i` such that `i + off` stays inside `0..extent`.
#[inline]
pub(crate) fn valid_range(off: isize, extent: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (extent as isize - off).clamp(0, extent as isize) as usize;
    (lo.min(hi), hi)
}

/// Direct volume convolution, summing per-channel 2D correlations.
pub fn conv_direct(x: &Tensor3, k: &KernelSet, bias: &[f64]) -> Result<Tensor3> {
    check_conv_args(x, k, bias)?;
    let (rows, cols, d, p) = (x.n_rows(), x.n_cols(), x.depth(), k.count());
    let (w, h) = (k.half_rows() as isize, k.half_cols() as isize);
    let mut y = Tensor3::zeros(rows, cols, p);
    for i in 0..rows {
        for j in 0..cols {
            for (t, &b0) in bias.iter().enumerate() {
                let mut acc = b0;
                for a in 0..k.k_rows() {
                    let si = i as isize + a as isize - w;
                    if si < 0 || si >= rows as isize {
                        continue;
                    }
                    for b in 0..k.k_cols() {
                        let sj = j as isize + b as isize - h;
                        if sj < 0 || sj >= cols as isize {
                            continue;
                        }
                        let xs = x.pixel(si as usize, sj as usize);
                        let gs = k.tap(t, a, b);
                        for u in 0..d {
                            acc += xs[u] * gs[u];
                        }
                    }
                }
                y.data[(i * cols + j) * p + t] = acc;
            }
        }
    }
    Ok(y)
}

/// `S_{di,dj}`: output `(i, j, u) = x(i - di, j - dj, u)`, zero outside.
pub fn shift(x: &Tensor3, di: isize, dj: isize) -> Tensor3 {
    let (rows, cols, d) = (x.n_rows(), x.n_cols(), x.depth());
    let mut y = Tensor3::zeros(rows, cols, d);
    let (i_lo, i_hi) = valid_range(-di, rows);
    let (j_lo, j_hi) = valid_range(-dj, cols);
    if j_lo >= j_hi {
        return y;
    }
    for i in i_lo..i_hi {
        let si = (i as isize - di) as usize;
        let sj = (j_lo as isize - dj) as usize;
        let src = x.index(si, sj, 0);
        let dst = y.index(i, j_lo, 0);
        let len = (j_hi - j_lo) * d;
        y.data[dst..dst + len].copy_from_slice(&x.data[src..src + len]);
    }
    y
}

/// Lowers `x` to its patch matrix: row `i * M + j` holds the `n * m * d`
/// zero-padded neighbourhood of pixel `(i, j)` in kernel order.
pub fn im2col(x: &Tensor3, k_rows: usize, k_cols: usize, out: &mut Vec<f64>) {
    let (rows, cols, d) = (x.n_rows(), x.n_cols(), x.depth());
    let (w, h) = (((k_rows - 1) / 2) as isize, ((k_cols - 1) / 2) as isize);
    let klen = k_rows * k_cols * d;
    out.clear();
    out.resize(rows * cols * klen, 0.0);
    for i in 0..rows {
        for j in 0..cols {
            let row = &mut out[(i * cols + j) * klen..(i * cols + j + 1) * klen];
            for a in 0..k_rows {
                let si = i as isize + a as isize - w;
                if si < 0 || si >= rows as isize {
                    continue;
                }
                // contiguous run of valid columns for this kernel row
                let (b_lo, b_hi) = {
                    let lo = (h - j as isize).max(0) as usize;
                    let hi = ((cols as isize - j as isize + h) as usize).min(k_cols);
                    (lo, hi)
                };
                if b_lo >= b_hi {
                    continue;
                }
                let sj = (j as isize + b_lo as isize - h) as usize;
                let src = x.index(si as usize, sj, 0);
                let dst = (a * k_cols + b_lo) * d;
                let len = (b_hi - b_lo) * d;
                row[dst..dst + len].copy_from_slice(&x.data[src..src + len]);
            }
        }
    }
}

/// Accumulates a patch-matrix gradient back onto the volume (adjoint of [`im2col`]).
pub fn col2im(cols_buf: &[f64], shape: Shape3, k_rows: usize, k_cols: usize) -> Tensor3 {
    let (rows, cols, d) = (shape.rows, shape.cols, shape.depth);
    let (w, h) = (((k_rows - 1) / 2) as isize, ((k_cols - 1) / 2) as isize);
    let klen = k_rows * k_cols * d;
    let mut x = Tensor3::zeros(rows, cols, d);
    for i in 0..rows {
        for j in 0..cols {
            let row = &cols_buf[(i * cols + j) * klen..(i * cols + j + 1) * klen];
            for a in 0..k_rows {
                let si = i as isize + a as isize - w;
                if si < 0 || si >= rows as isize {
                    continue;
                }
                for b in 0..k_cols {
                    let sj = j as isize + b as isize - h;
                    if sj < 0 || sj >= cols as isize {
                        continue;
                    }
                    let dst = x.index(si as usize, sj as usize, 0);
                    let src = (a * k_cols + b) * d;
                    for u in 0..d {
                        x.data[dst + u] += row[src + u];
                    }
                }
            }
        }
    }
    x
}

/// Strided `C = A * B + beta * C`. Strides are `(row, col)` in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
    sc: (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // matrixmultiply does not touch C when k == 0
        for i in 0..m {
            for j in 0..n {
                c[i * sc.0 + j * sc.1] *= beta;
            }
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
    debug_assert!(b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
    debug_assert!(c.len() > (m - 1) * sc.0 + (n - 1) * sc.1);
    // SAFETY: the debug assertions above spell out the bounds every caller
    // guarantees; all strides are in-bounds offsets into the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

/// Convolution lowered to one dense product of the patch matrix with the
/// kernel matrix. Same numeric contract as [`conv_direct`].
pub fn conv_unrolled(x: &Tensor3, k: &KernelSet, bias: &[f64]) -> Result<Tensor3> {
    let mut scratch = Vec::new();
    conv_unrolled_with(x, k, bias, &mut scratch)
}

/// [`conv_unrolled`] reusing a caller-owned patch buffer.
pub fn conv_unrolled_with(
    x: &Tensor3,
    k: &KernelSet,
    bias: &[f64],
    patches: &mut Vec<f64>,
) -> Result<Tensor3> {
    check_conv_args(x, k, bias)?;
    let (rows, cols, p) = (x.n_rows(), x.n_cols(), k.count());
    let klen = k.kernel_len();
    let pixels = rows * cols;
    let mut y = Tensor3::zeros(rows, cols, p);
    for px in 0..pixels {
        y.data[px * p..(px + 1) * p].copy_from_slice(bias);
    }
    if k.k_rows() == 1 && k.k_cols() == 1 {
        // 1x1 kernels: the volume itself is the patch matrix
        gemm(pixels, klen, p, x.data(), (klen, 1), k.data(), (1, klen), &mut y.data, (p, 1), 1.0);
    } else {
        im2col(x, k.k_rows(), k.k_cols(), patches);
        gemm(pixels, klen, p, patches, (klen, 1), k.data(), (1, klen), &mut y.data, (p, 1), 1.0);
    }
    Ok(y)
}

//! Dense containers and the kernels every engine is built on.
//!
//! [`Mat`] holds `samples x features` data (or `neurons x inputs` weights),
//! [`Ten3`] holds `samples x channels x positions` data (or
//! `filters x channels x taps` kernels). Both are row-major `f64`.
//!
//! The 1-D convolution family follows 1-based index formulas; the
//! implementations translate to 0-based indices and treat reads outside
//! the source range as zero.

mod adjoint;
mod conv;
mod gemm;

pub use adjoint::{adjoint_trials, AdjointReport};
pub use conv::{conv1d, conv1d_correlate, conv1d_transpose};
pub use gemm::{matmul, matmul_naive, matmul_nt, matmul_tn};

use crate::error::{shape_err, Result};

/// Read-only view shared by [`Mat`] and [`Ten3`].
pub trait Array {
    fn shape(&self) -> Vec<usize>;
    fn data(&self) -> &[f64];

    fn frobenius_norm(&self) -> f64 {
        self.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

/// Sum of elementwise products of two identically shaped arrays.
pub fn frobenius_inner<A: Array + ?Sized, B: Array + ?Sized>(a: &A, b: &B) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_err(format!("frobenius_inner: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
}

/// Largest elementwise relative deviation `|a - b| / max(|b|, floor)`.
pub fn max_rel_deviation(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "max_rel_deviation: length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(floor)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!("Mat::new: {} values for {rows}x{cols}", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "Mat::from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Mat {
        Mat { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }

    /// Gathers the listed rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat { rows: idx.len(), cols: self.cols, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Mat, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.rows != other.rows || self.cols != other.cols {
            return shape_err(format!("{what}: {}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Multiplies column `j` by `factors[j]`, i.e. `self * diag(factors)`.
    pub fn scale_columns(&self, factors: &[f64]) -> Mat {
        assert_eq!(factors.len(), self.cols, "scale_columns: factor count");
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, f) in row.iter_mut().zip(factors) {
                *v *= f;
            }
        }
        out
    }

    /// Euclidean norm of every row.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    /// Euclidean norm of every column.
    pub fn col_norms(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (a, v) in acc.iter_mut().zip(self.row(r)) {
                *a += v * v;
            }
        }
        acc.into_iter().map(f64::sqrt).collect()
    }

    /// Reinterprets the row-major buffer as `rows x d1 x d2`.
    pub fn into_ten3(self, d1: usize, d2: usize) -> Result<Ten3> {
        if d1 * d2 != self.cols {
            return shape_err(format!("into_ten3: {} columns cannot be viewed as {d1}x{d2}", self.cols));
        }
        Ten3::new([self.rows, d1, d2], self.data)
    }
}

impl Array for Mat {
    fn shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ten3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Ten3 {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return shape_err(format!("Ten3::new: {} values for {:?}", data.len(), dims));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.dims[1] + b) * self.dims[2] + c
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[self.offset(a, b, c)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, v: f64) {
        let o = self.offset(a, b, c);
        self.data[o] = v;
    }

    /// The `dim1 x dim2` slab at `dim0 = a`.
    pub fn slab(&self, a: usize) -> &[f64] {
        let n = self.dims[1] * self.dims[2];
        &self.data[a * n..(a + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Ten3 {
        Ten3 { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: f64) -> Ten3 {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Ten3) -> Result<Ten3> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Ten3) -> Result<Ten3> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Ten3) -> Result<Ten3> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Ten3, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Ten3> {
        if self.dims != other.dims {
            return shape_err(format!("{what}: {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(Ten3 { dims: self.dims, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    /// Multiplies every entry with middle index `i` by `factors[i]`.
    pub fn scale_channels(&self, factors: &[f64]) -> Ten3 {
        assert_eq!(factors.len(), self.dims[1], "scale_channels: factor count");
        let mut out = self.clone();
        let d2 = self.dims[2];
        for (idx, chunk) in out.data.chunks_exact_mut(d2.max(1)).enumerate() {
            let f = factors[idx % self.dims[1]];
            for v in chunk {
                *v *= f;
            }
        }
        out
    }

    /// Frobenius norm of each `dim0` slab (one value per filter for kernels).
    pub fn slab_norms(&self) -> Vec<f64> {
        (0..self.dims[0]).map(|a| self.slab(a).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    /// Frobenius norm of each `dim1` channel taken across samples and positions.
    pub fn channel_norms(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dims[1]];
        let d2 = self.dims[2];
        for (idx, chunk) in self.data.chunks_exact(d2.max(1)).enumerate() {
            acc[idx % self.dims[1]] += chunk.iter().map(|v| v * v).sum::<f64>();
        }
        acc.into_iter().map(f64::sqrt).collect()
    }

    /// Flattens each `dim0` slab into one row.
    pub fn into_mat(self) -> Mat {
        Mat { rows: self.dims[0], cols: self.dims[1] * self.dims[2], data: self.data }
    }
}

impl Array for Ten3 {
    fn shape(&self) -> Vec<usize> {
        self.dims.to_vec()
    }

    fn data(&self) -> &[f64] {
        &self.data
    }
}

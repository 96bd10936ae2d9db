//! Register-blocked matrix products.
//!
//! Every output element is accumulated as `0.0 + a0*b0 + a1*b1 + ...` in
//! ascending inner index, with separate multiply and add (no fused
//! multiply-add). That is exactly the order of the naive triple loop, so the
//! blocked path is bit-identical to [`matmul_naive`] for any operand
//! transposition.

use super::Mat;
use crate::error::{shape_err, Result};

const MR: usize = 8;
const NR: usize = 8;

#[derive(Clone, Copy)]
struct Strided<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl Strided<'_> {
    #[inline(always)]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.rs + c * self.cs]
    }
}

/// `A * B`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.rows() {
        return shape_err(format!("matmul: {}x{} * {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
    }
    let av = Strided { data: a.as_slice(), rs: a.cols(), cs: 1 };
    let bv = Strided { data: b.as_slice(), rs: b.cols(), cs: 1 };
    Mat::new(a.rows(), b.cols(), gemm(a.rows(), b.cols(), a.cols(), av, bv))
}

/// `A * B^T`.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.cols() {
        return shape_err(format!("matmul_nt: {}x{} * ({}x{})^T", a.rows(), a.cols(), b.rows(), b.cols()));
    }
    let av = Strided { data: a.as_slice(), rs: a.cols(), cs: 1 };
    let bv = Strided { data: b.as_slice(), rs: 1, cs: b.cols() };
    Mat::new(a.rows(), b.rows(), gemm(a.rows(), b.rows(), a.cols(), av, bv))
}

/// `A^T * B`.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows() != b.rows() {
        return shape_err(format!("matmul_tn: ({}x{})^T * {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
    }
    let av = Strided { data: a.as_slice(), rs: 1, cs: a.cols() };
    let bv = Strided { data: b.as_slice(), rs: b.cols(), cs: 1 };
    Mat::new(a.cols(), b.cols(), gemm(a.cols(), b.cols(), a.rows(), av, bv))
}

/// Scalar triple loop; the reference every fast path is compared against.
pub fn matmul_naive(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.rows() {
        return shape_err(format!("matmul_naive: {}x{} * {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
    }
    let mut out = Mat::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for t in 0..a.cols() {
                acc += a.get(i, t) * b.get(t, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

fn gemm(m: usize, n: usize, k: usize, a: Strided<'_>, b: Strided<'_>) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let panels = n.div_ceil(NR);
    let mut bp = vec![0.0; panels * k * NR];
    for p in 0..panels {
        let panel = &mut bp[p * k * NR..(p + 1) * k * NR];
        let width = NR.min(n - p * NR);
        for t in 0..k {
            for jj in 0..width {
                panel[t * NR + jj] = b.at(t, p * NR + jj);
            }
        }
    }
    let mut ap = vec![0.0; k * MR];
    for ib in (0..m).step_by(MR) {
        let height = MR.min(m - ib);
        ap.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..k {
            for ii in 0..height {
                ap[t * MR + ii] = a.at(ib + ii, t);
            }
        }
        for p in 0..panels {
            let acc = kernel(&ap, &bp[p * k * NR..(p + 1) * k * NR]);
            let width = NR.min(n - p * NR);
            for (ii, row) in acc.iter().enumerate().take(height) {
                let dst = (ib + ii) * n + p * NR;
                c[dst..dst + width].copy_from_slice(&row[..width]);
            }
        }
    }
    c
}

#[inline(always)]
fn kernel_body(ap: &[f64], bp: &[f64]) -> [[f64; NR]; MR] {
    let mut acc = [[0.0; NR]; MR];
    for (a, b) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
        for i in 0..MR {
            for j in 0..NR {
                acc[i][j] += a[i] * b[j];
            }
        }
    }
    acc
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn kernel_avx512(ap: &[f64], bp: &[f64]) -> [[f64; NR]; MR] {
    kernel_body(ap, bp)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn kernel_avx2(ap: &[f64], bp: &[f64]) -> [[f64; NR]; MR] {
    kernel_body(ap, bp)
}

#[inline]
fn kernel(ap: &[f64], bp: &[f64]) -> [[f64; NR]; MR] {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports AVX-512F, checked just above.
            return unsafe { kernel_avx512(ap, bp) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { kernel_avx2(ap, bp) };
        }
    }
    kernel_body(ap, bp)
}

//! 1-D convolution, its transpose, and the input/signal correlation.
//!
//! With 1-based indices:
//!
//! - `conv1d(A, W)[s,i,p]        = sum_{j,e} A[s,j,p-e+k] * W[i,j,e]`
//! - `conv1d_transpose(A, W)[s,i,p] = sum_{j,e} A[s,j,p+e-k] * W[j,i,e]`
//! - `conv1d_correlate(A, B)[i,j,e] = sum_{s,p} A[s,i,p] * B[s,j,p-e+k]`
//!
//! Out-of-range reads in the transpose contribute zero.

use super::Ten3;
use crate::error::{shape_err, Result};

/// Valid (non-padded) convolution: `m x n' x d` with `n x n' x k` gives `m x n x (d-k+1)`.
pub fn conv1d(a: &Ten3, w: &Ten3) -> Result<Ten3> {
    let [m, cin, d] = a.dims();
    let [cout, wcin, k] = w.dims();
    if wcin != cin {
        return shape_err(format!("conv1d: input has {cin} channels, kernel expects {wcin}"));
    }
    if k == 0 || k > d {
        return shape_err(format!("conv1d: kernel size {k} invalid for length {d}"));
    }
    let dout = d - k + 1;
    let mut out = Ten3::zeros([m, cout, dout]);
    for s in 0..m {
        for i in 0..cout {
            for p in 0..dout {
                let mut acc = 0.0;
                for j in 0..cin {
                    for e in 0..k {
                        acc += a.get(s, j, p + k - 1 - e) * w.get(i, j, e);
                    }
                }
                out.set(s, i, p, acc);
            }
        }
    }
    Ok(out)
}

/// Full transposed convolution: `m x n' x d` with `n' x n x k` gives `m x n x (d+k-1)`.
pub fn conv1d_transpose(a: &Ten3, w: &Ten3) -> Result<Ten3> {
    let [m, cin, d] = a.dims();
    let [wcin, cout, k] = w.dims();
    if wcin != cin {
        return shape_err(format!("conv1d_transpose: input has {cin} channels, kernel expects {wcin}"));
    }
    if k == 0 {
        return shape_err("conv1d_transpose: empty kernel");
    }
    let dout = d + k - 1;
    let mut out = Ten3::zeros([m, cout, dout]);
    for s in 0..m {
        for i in 0..cout {
            for p in 0..dout {
                let mut acc = 0.0;
                for j in 0..cin {
                    for e in 0..k {
                        // 0-based source index p + e + 1 - k
                        let src = p + e + 1;
                        if src < k || src - k >= d {
                            continue;
                        }
                        acc += a.get(s, j, src - k) * w.get(j, i, e);
                    }
                }
                out.set(s, i, p, acc);
            }
        }
    }
    Ok(out)
}

/// Correlation of `m x n' x d` with `m x n x (d+k-1)`, giving an `n' x n x k` kernel.
pub fn conv1d_correlate(a: &Ten3, b: &Ten3, k: usize) -> Result<Ten3> {
    let [m, ca, d] = a.dims();
    let [mb, cb, db] = b.dims();
    if m != mb {
        return shape_err(format!("conv1d_correlate: sample counts {m} vs {mb}"));
    }
    if k == 0 {
        return shape_err("conv1d_correlate: kernel size must be at least 1");
    }
    if db != d + k - 1 {
        return shape_err(format!("conv1d_correlate: second operand length {db}, expected {d} + {k} - 1"));
    }
    let mut out = Ten3::zeros([ca, cb, k]);
    for i in 0..ca {
        for j in 0..cb {
            for e in 0..k {
                let mut acc = 0.0;
                for s in 0..m {
                    for p in 0..d {
                        acc += a.get(s, i, p) * b.get(s, j, p + k - 1 - e);
                    }
                }
                out.set(i, j, e, acc);
            }
        }
    }
    Ok(out)
}

use super::{Batch, Head};
use crate::error::{input_err, shape_err, Result};
use crate::tensor::Mat;

/// Supervision for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// One class index per sample.
    Classes(Vec<usize>),
    /// One target row per sample, matched against the flattened output.
    Values(Mat),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(y) => y.len(),
            Targets::Values(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(y) => Targets::Classes(idx.iter().map(|&i| y[i]).collect()),
            Targets::Values(t) => Targets::Values(t.select_rows(idx)),
        }
    }
}

/// Loss and `rL = -dloss/d(output)` for a batch of network outputs.
///
/// The signal has the same kind and shape as `output`.
pub fn head_signal(head: Head, output: &Batch, targets: &Targets) -> Result<(f64, Batch)> {
    let out = output.to_flat();
    let (m, n) = (out.rows(), out.cols());
    if targets.len() != m {
        return shape_err(format!("{} targets for {m} samples", targets.len()));
    }
    if m == 0 {
        return input_err("empty batch");
    }
    let inv_m = 1.0 / m as f64;
    let mut r = Mat::zeros(m, n);
    let mut loss = 0.0;
    match (head, targets) {
        (Head::SoftmaxCrossEntropy, Targets::Classes(y)) => {
            for (s, &label) in y.iter().enumerate() {
                if label >= n {
                    return input_err(format!("label {label} with {n} classes"));
                }
                let row = out.row(s);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                loss += max + sum.ln() - row[label];
                let dst = r.row_mut(s);
                for (j, (d, v)) in dst.iter_mut().zip(row).enumerate() {
                    let p = (v - max).exp() / sum;
                    let hot = if j == label { 1.0 } else { 0.0 };
                    *d = (hot - p) * inv_m;
                }
            }
        }
        (Head::SquaredError, Targets::Values(t)) => {
            if t.cols() != n {
                return shape_err(format!("targets have {} columns, output {n}", t.cols()));
            }
            for s in 0..m {
                let dst = r.row_mut(s);
                for ((d, o), tv) in dst.iter_mut().zip(out.row(s)).zip(t.row(s)) {
                    let diff = tv - o;
                    loss += 0.5 * diff * diff;
                    *d = diff * inv_m;
                }
            }
        }
        (Head::SquaredError, Targets::Classes(y)) => {
            for (s, &label) in y.iter().enumerate() {
                if label >= n {
                    return input_err(format!("label {label} with {n} outputs"));
                }
                let dst = r.row_mut(s);
                for (j, (d, o)) in dst.iter_mut().zip(out.row(s)).enumerate() {
                    let diff = if j == label { 1.0 } else { 0.0 } - o;
                    loss += 0.5 * diff * diff;
                    *d = diff * inv_m;
                }
            }
        }
        (Head::SoftmaxCrossEntropy, Targets::Values(_)) => {
            return input_err("softmax head needs class labels");
        }
    }
    Ok((loss * inv_m, Batch::from_flat_like(r, output)?))
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(m: &Mat) -> Vec<usize> {
    (0..m.rows())
        .map(|s| {
            let row = m.row(s);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of samples whose argmax matches the label.
pub fn accuracy(output: &Batch, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let pred = argmax_rows(&output.to_flat());
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

use crate::error::{shape_err, Result};
use crate::tensor::{Array, Mat, Ten3};

/// A batch of per-sample values: `samples x features` or
/// `samples x channels x positions`.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Flat(Mat),
    Seq(Ten3),
}

impl Batch {
    pub fn samples(&self) -> usize {
        match self {
            Batch::Flat(m) => m.rows(),
            Batch::Seq(t) => t.dims()[0],
        }
    }

    /// Number of per-sample units (features or channels).
    pub fn units(&self) -> usize {
        match self {
            Batch::Flat(m) => m.cols(),
            Batch::Seq(t) => t.dims()[1],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Batch::Flat(m) => m.as_slice(),
            Batch::Seq(t) => t.as_slice(),
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            Batch::Flat(m) => m.as_mut_slice(),
            Batch::Seq(t) => t.as_mut_slice(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Batch::Flat(m) => m.shape(),
            Batch::Seq(t) => t.shape(),
        }
    }

    /// Flattened `samples x features` view (copying for sequences).
    pub fn to_flat(&self) -> Mat {
        match self {
            Batch::Flat(m) => m.clone(),
            Batch::Seq(t) => t.clone().into_mat(),
        }
    }

    pub fn as_flat(&self) -> Option<&Mat> {
        match self {
            Batch::Flat(m) => Some(m),
            Batch::Seq(_) => None,
        }
    }

    pub fn as_seq(&self) -> Option<&Ten3> {
        match self {
            Batch::Seq(t) => Some(t),
            Batch::Flat(_) => None,
        }
    }

    /// Rebuilds a batch of the same kind and shape as `like` from a flat matrix.
    pub fn from_flat_like(flat: Mat, like: &Batch) -> Result<Batch> {
        match like {
            Batch::Flat(m) => {
                if m.rows() != flat.rows() || m.cols() != flat.cols() {
                    return shape_err("from_flat_like: shape mismatch");
                }
                Ok(Batch::Flat(flat))
            }
            Batch::Seq(t) => {
                let [_, c, d] = t.dims();
                Ok(Batch::Seq(flat.into_ten3(c, d)?))
            }
        }
    }

    pub fn zeros_like(&self) -> Batch {
        match self {
            Batch::Flat(m) => Batch::Flat(Mat::zeros(m.rows(), m.cols())),
            Batch::Seq(t) => Batch::Seq(Ten3::zeros(t.dims())),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Batch {
        match self {
            Batch::Flat(m) => Batch::Flat(m.map(f)),
            Batch::Seq(t) => Batch::Seq(t.map(f)),
        }
    }

    pub fn scale(&self, s: f64) -> Batch {
        self.map(|v| v * s)
    }

    pub fn hadamard(&self, other: &Batch) -> Result<Batch> {
        match (self, other) {
            (Batch::Flat(a), Batch::Flat(b)) => Ok(Batch::Flat(a.hadamard(b)?)),
            (Batch::Seq(a), Batch::Seq(b)) => Ok(Batch::Seq(a.hadamard(b)?)),
            _ => shape_err("hadamard: flat vs sequence batch"),
        }
    }

    /// Multiplies unit `i` (column / channel) by `factors[i]`.
    pub fn scale_units(&self, factors: &[f64]) -> Batch {
        match self {
            Batch::Flat(m) => Batch::Flat(m.scale_columns(factors)),
            Batch::Seq(t) => Batch::Seq(t.scale_channels(factors)),
        }
    }

    /// Norm of each unit's values across samples (and positions).
    pub fn unit_norms(&self) -> Vec<f64> {
        match self {
            Batch::Flat(m) => m.col_norms(),
            Batch::Seq(t) => t.channel_norms(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.as_slice().iter().all(|v| v.is_finite())
    }

    /// Samples at the given indices, in order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        match self {
            Batch::Flat(m) => Batch::Flat(m.select_rows(idx)),
            Batch::Seq(t) => {
                let [_, c, d] = t.dims();
                let mut data = Vec::with_capacity(idx.len() * c * d);
                for &i in idx {
                    data.extend_from_slice(t.slab(i));
                }
                Batch::Seq(Ten3::new([idx.len(), c, d], data).expect("consistent dims"))
            }
        }
    }
}

impl From<Mat> for Batch {
    fn from(m: Mat) -> Self {
        Batch::Flat(m)
    }
}

impl From<Ten3> for Batch {
    fn from(t: Ten3) -> Self {
        Batch::Seq(t)
    }
}

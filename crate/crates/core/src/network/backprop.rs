//! Linear maps shared by the backward engines.

use super::{Batch, Weights};
use crate::error::{shape_err, Result};
use crate::tensor::{conv1d_correlate, conv1d_transpose, matmul, matmul_tn};

/// `signal^T . input` (dense) or `psi(signal, input)` (conv): the weight-shaped
/// product of a layer's output signal with the layer's input.
pub fn weight_product(w: &Weights, signal: &Batch, input: &Batch) -> Result<Weights> {
    match w {
        Weights::Dense(_) => {
            let s = signal.as_flat().ok_or_else(|| crate::Error::Shape("dense layer with a sequence signal".into()))?;
            let p = match input {
                Batch::Flat(x) => matmul_tn(s, x)?,
                Batch::Seq(x) => matmul_tn(s, &x.clone().into_mat())?,
            };
            Ok(Weights::Dense(p))
        }
        Weights::Conv(k) => match (signal, input) {
            (Batch::Seq(s), Batch::Seq(x)) => Ok(Weights::Conv(conv1d_correlate(s, x, k.dims()[2])?)),
            _ => shape_err("conv layer needs sequence signal and input"),
        },
    }
}

/// Carries a layer's output signal back to its input: `signal . w` (dense) or
/// `ConvT(signal, w)` (conv), shaped like `input`.
pub fn propagate(w: &Weights, signal: &Batch, input: &Batch) -> Result<Batch> {
    match (w, signal) {
        (Weights::Dense(w), Batch::Flat(s)) => Batch::from_flat_like(matmul(s, w)?, input),
        (Weights::Conv(w), Batch::Seq(s)) => Ok(Batch::Seq(conv1d_transpose(s, w)?)),
        _ => shape_err("signal kind does not match layer kind"),
    }
}

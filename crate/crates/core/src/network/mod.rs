//! Topology, parameters, forward passes and the loss head.
//!
//! Layers carry no bias terms. A constant input feature can be appended to
//! the data when an offset is needed.

mod backprop;
mod batch;
mod forward;
mod head;
mod io;

pub use backprop::{propagate, weight_product};
pub use batch::Batch;
pub use forward::{forward, forward_cnn, forward_mlp, preactivation, ForwardCache, LayerCache};
pub use head::{accuracy, argmax_rows, head_signal, Targets};
pub use io::{read_params, write_params};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{input_err, shape_err, Result};
use crate::tensor::{Array, Mat, Ten3};

/// Piecewise-linear activation with its breakpoint at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
        }
    }

    /// Slope of the linear piece containing `z`; the left piece at `z == 0`.
    #[inline]
    pub fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }

    /// Whether `z` sits exactly on a breakpoint.
    pub fn is_breakpoint(self, z: f64) -> bool {
        !matches!(self, Activation::Identity) && z == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Dense { out: usize },
    Conv1d { out_channels: usize, kernel: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
}

/// Loss attached to the last layer's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Softmax over each sample's flattened output, mean cross-entropy.
    SoftmaxCrossEntropy,
    /// Half the per-sample squared error, averaged over samples.
    SquaredError,
}

/// Per-sample shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Seq { channels: usize, length: usize },
}

impl Shape {
    pub fn size(self) -> usize {
        match self {
            Shape::Flat(n) => n,
            Shape::Seq { channels, length } => channels * length,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    pub head: Head,
}

impl NetSpec {
    /// Dense network over `widths = [inputs, hidden.., outputs]`; hidden layers
    /// use `hidden`, the output layer is linear and feeds a softmax head.
    pub fn mlp(widths: &[usize], hidden: Activation) -> NetSpec {
        assert!(widths.len() >= 2, "NetSpec::mlp needs input and output widths");
        let last = widths.len() - 2;
        let layers = widths[1..]
            .iter()
            .enumerate()
            .map(|(l, &out)| LayerSpec {
                kind: LayerKind::Dense { out },
                activation: if l == last { Activation::Identity } else { hidden },
            })
            .collect();
        NetSpec { input: Shape::Flat(widths[0]), layers, head: Head::SoftmaxCrossEntropy }
    }

    /// Convolutional network; `filters[l] = (out_channels, kernel)`.
    pub fn cnn(
        in_channels: usize,
        length: usize,
        filters: &[(usize, usize)],
        hidden: Activation,
        head: Head,
    ) -> NetSpec {
        let last = filters.len().saturating_sub(1);
        let layers = filters
            .iter()
            .enumerate()
            .map(|(l, &(out_channels, kernel))| LayerSpec {
                kind: LayerKind::Conv1d { out_channels, kernel },
                activation: if l == last { Activation::Identity } else { hidden },
            })
            .collect();
        NetSpec { input: Shape::Seq { channels: in_channels, length }, layers, head }
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    /// Output shape of every layer, validating that consecutive layers compose.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.layers.is_empty() {
            return input_err("network needs at least one layer");
        }
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            if let Activation::LeakyRelu { slope } = layer.activation {
                if !slope.is_finite() {
                    return input_err(format!("layer {}: non-finite leaky slope", l + 1));
                }
            }
            cur = match (layer.kind, cur) {
                (LayerKind::Dense { out }, _) => Shape::Flat(out),
                (LayerKind::Conv1d { out_channels, kernel }, Shape::Seq { length, .. }) => {
                    if kernel == 0 || kernel > length {
                        return shape_err(format!("layer {}: kernel {kernel} does not fit length {length}", l + 1));
                    }
                    Shape::Seq { channels: out_channels, length: length - kernel + 1 }
                }
                (LayerKind::Conv1d { .. }, Shape::Flat(_)) => {
                    return shape_err(format!("layer {}: convolution after a flat layer", l + 1))
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// Input shape of layer `l` (0-based).
    pub fn input_shape(&self, l: usize) -> Result<Shape> {
        if l == 0 {
            Ok(self.input)
        } else {
            Ok(self.shapes()?[l - 1])
        }
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(*self.shapes()?.last().expect("validated non-empty"))
    }
}

/// Weights of one layer. Agent `i` owns row `i` (dense) or filter `i` (conv).
#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Dense(Mat),
    Conv(Ten3),
}

impl Weights {
    pub fn agents(&self) -> usize {
        match self {
            Weights::Dense(w) => w.rows(),
            Weights::Conv(w) => w.dims()[0],
        }
    }

    /// Per-agent norm of the input weights (row / filter Frobenius norm).
    pub fn agent_norms(&self) -> Vec<f64> {
        match self {
            Weights::Dense(w) => w.row_norms(),
            Weights::Conv(w) => w.slab_norms(),
        }
    }

    /// Input weights of agent `i`, flattened.
    pub fn agent(&self, i: usize) -> &[f64] {
        match self {
            Weights::Dense(w) => w.row(i),
            Weights::Conv(w) => w.slab(i),
        }
    }

    pub fn agent_mut(&mut self, i: usize) -> &mut [f64] {
        match self {
            Weights::Dense(w) => w.row_mut(i),
            Weights::Conv(w) => {
                let [_, a, b] = w.dims();
                &mut w.as_mut_slice()[i * a * b..(i + 1) * a * b]
            }
        }
    }

    /// Outgoing connections of input unit `j`: column `j` (dense) or the
    /// `[:, j, :]` slice (conv).
    pub fn outgoing(&self, j: usize) -> Vec<f64> {
        match self {
            Weights::Dense(w) => w.column(j),
            Weights::Conv(w) => {
                let [n, _, k] = w.dims();
                let mut out = Vec::with_capacity(n * k);
                for i in 0..n {
                    for e in 0..k {
                        out.push(w.get(i, j, e));
                    }
                }
                out
            }
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match self {
            Weights::Dense(w) => w.shape(),
            Weights::Conv(w) => w.shape(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Weights::Dense(w) => w.as_slice(),
            Weights::Conv(w) => w.as_slice(),
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            Weights::Dense(w) => w.as_mut_slice(),
            Weights::Conv(w) => w.as_mut_slice(),
        }
    }

    pub fn zeros_like(&self) -> Weights {
        match self {
            Weights::Dense(w) => Weights::Dense(Mat::zeros(w.rows(), w.cols())),
            Weights::Conv(w) => Weights::Conv(Ten3::zeros(w.dims())),
        }
    }

    /// `self + s * other`; shapes must agree.
    pub fn add_scaled(&self, other: &Weights, s: f64) -> Result<Weights> {
        if self.dims() != other.dims() || std::mem::discriminant(self) != std::mem::discriminant(other) {
            return shape_err(format!("weights {:?} vs {:?}", self.dims(), other.dims()));
        }
        let mut out = self.clone();
        for (v, d) in out.as_mut_slice().iter_mut().zip(other.as_slice()) {
            *v += s * d;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Weights>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|w| w.as_slice().len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|w| w.as_slice().iter().all(|v| v.is_finite()))
    }

    /// Checks that every layer matches the topology.
    pub fn check(&self, spec: &NetSpec) -> Result<()> {
        let expected = expected_dims(spec)?;
        if expected.len() != self.layers.len() {
            return shape_err(format!("{} weight layers for a {}-layer network", self.layers.len(), expected.len()));
        }
        for (l, (w, dims)) in self.layers.iter().zip(&expected).enumerate() {
            let ok = match (w, dims.len()) {
                (Weights::Dense(_), 2) | (Weights::Conv(_), 3) => w.dims() == *dims,
                _ => false,
            };
            if !ok {
                return shape_err(format!("layer {}: weights {:?}, topology wants {:?}", l + 1, w.dims(), dims));
            }
        }
        Ok(())
    }
}

fn expected_dims(spec: &NetSpec) -> Result<Vec<Vec<usize>>> {
    spec.shapes()?;
    let mut dims = Vec::with_capacity(spec.layers.len());
    for (l, layer) in spec.layers.iter().enumerate() {
        let input = spec.input_shape(l)?;
        dims.push(match (layer.kind, input) {
            (LayerKind::Dense { out }, inp) => vec![out, inp.size()],
            (LayerKind::Conv1d { out_channels, kernel }, Shape::Seq { channels, .. }) => {
                vec![out_channels, channels, kernel]
            }
            (LayerKind::Conv1d { .. }, Shape::Flat(_)) => unreachable!("rejected by shapes()"),
        });
    }
    Ok(dims)
}

/// Uniform `(-b, b)` weights with `b = sqrt(6 / fan_in)`.
///
/// The stream comes from ChaCha8 (a counter-based generator) seeded with
/// `seed`, consumed layer by layer in row-major order, so a seed fixes every
/// weight on every platform.
pub fn init_params(spec: &NetSpec, seed: u64) -> Result<Params> {
    let dims = expected_dims(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len());
    for d in dims {
        let fan_in: usize = d[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let data: Vec<f64> = (0..d.iter().product::<usize>())
            .map(|_| loop {
                let v = rng.random_range(-bound..bound);
                if v != -bound {
                    break v;
                }
            })
            .collect();
        layers.push(if d.len() == 2 {
            Weights::Dense(Mat::new(d[0], d[1], data)?)
        } else {
            Weights::Conv(Ten3::new([d[0], d[1], d[2]], data)?)
        });
    }
    Ok(Params { layers })
}

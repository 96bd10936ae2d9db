use super::{Batch, NetSpec, Params, Shape, Weights};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{conv1d, matmul_nt, Mat, Ten3};

/// Values recorded for one layer during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    /// Pre-activations.
    pub z: Batch,
    /// Outputs `f(z)`.
    pub a: Batch,
    /// Slope of the active linear piece at each `z`.
    pub slope: Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub input: Batch,
    pub layers: Vec<LayerCache>,
}

impl ForwardCache {
    /// Output of layer `l`, with `l = 0` the network input.
    pub fn activation(&self, l: usize) -> &Batch {
        if l == 0 {
            &self.input
        } else {
            &self.layers[l - 1].a
        }
    }

    pub fn output(&self) -> &Batch {
        self.activation(self.layers.len())
    }
}

/// Pre-activations of a layer with weights `w` fed by `input`.
pub fn preactivation(w: &Weights, input: &Batch) -> Result<Batch> {
    match w {
        Weights::Dense(w) => {
            let z = match input {
                Batch::Flat(x) => matmul_nt(x, w)?,
                Batch::Seq(x) => matmul_nt(&x.clone().into_mat(), w)?,
            };
            Ok(Batch::Flat(z))
        }
        Weights::Conv(w) => match input {
            Batch::Seq(x) => Ok(Batch::Seq(conv1d(x, w)?)),
            Batch::Flat(_) => shape_err("convolution needs a sequence input"),
        },
    }
}

fn check_input(spec: &NetSpec, x: &Batch) -> Result<()> {
    let ok = match (spec.input, x) {
        (Shape::Flat(n), Batch::Flat(m)) => m.cols() == n,
        (Shape::Seq { channels, length }, Batch::Seq(t)) => {
            let [_, c, d] = t.dims();
            c == channels && d == length
        }
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        shape_err(format!("input {:?} does not match network input {:?}", x.shape(), spec.input))
    }
}

/// Runs the network on `x`, recording `z`, `a` and slopes for every layer.
pub fn forward(spec: &NetSpec, params: &Params, x: &Batch) -> Result<ForwardCache> {
    params.check(spec)?;
    check_input(spec, x)?;
    if !x.all_finite() {
        return Err(Error::Diverged { layer: 0 });
    }
    let mut layers: Vec<LayerCache> = Vec::with_capacity(spec.layers.len());
    for (l, (layer, w)) in spec.layers.iter().zip(&params.layers).enumerate() {
        let prev = layers.last().map_or(x, |c| &c.a);
        let z = preactivation(w, prev)?;
        if !z.all_finite() {
            return Err(Error::Diverged { layer: l + 1 });
        }
        let act = layer.activation;
        let a = z.map(|v| act.apply(v));
        let slope = z.map(|v| act.slope(v));
        layers.push(LayerCache { z, a, slope });
    }
    Ok(ForwardCache { input: x.clone(), layers })
}

pub fn forward_mlp(spec: &NetSpec, params: &Params, x: &Mat) -> Result<ForwardCache> {
    forward(spec, params, &Batch::Flat(x.clone()))
}

pub fn forward_cnn(spec: &NetSpec, params: &Params, x: &Ten3) -> Result<ForwardCache> {
    forward(spec, params, &Batch::Seq(x.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, Activation, Head, LayerKind, LayerSpec};
    use crate::tensor::{matmul_naive, Array};
    use proptest::prelude::*;

    fn one_layer(n_in: usize, n_out: usize, act: Activation) -> NetSpec {
        NetSpec {
            input: Shape::Flat(n_in),
            layers: vec![LayerSpec { kind: LayerKind::Dense { out: n_out }, activation: act }],
            head: Head::SquaredError,
        }
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let spec = one_layer(3, 3, Activation::Identity);
        let params = Params { layers: vec![Weights::Dense(Mat::identity(3))] };
        let x = Mat::from_rows(&[&[1.0, -2.0, 3.5], &[0.0, 4.0, -1.0]]);
        let cache = forward_mlp(&spec, &params, &x).unwrap();
        assert_eq!(cache.output().as_flat().unwrap(), &x);
    }

    #[test]
    fn relu_hand_example() {
        // z = x . w^T = [1*1 + -2*0, 1*1 + -2*1] = [1, -1]
        let spec = one_layer(2, 2, Activation::Relu);
        let w = Mat::from_rows(&[&[1.0, 0.0], &[1.0, 1.0]]);
        let x = Mat::from_rows(&[&[1.0, -2.0]]);
        let oracle = matmul_naive(&x, &w.transpose()).unwrap();
        assert_eq!(oracle.as_slice(), &[1.0, -1.0]);
        let params = Params { layers: vec![Weights::Dense(w)] };
        let cache = forward_mlp(&spec, &params, &x).unwrap();
        let c = &cache.layers[0];
        assert_eq!(c.z.as_slice(), &[1.0, -1.0]);
        assert_eq!(c.a.as_slice(), &[1.0, 0.0]);
        assert_eq!(c.slope.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn zero_input_under_relu() {
        let spec = NetSpec::mlp(&[4, 5, 3], Activation::Relu);
        let params = init_params(&spec, 1).unwrap();
        let cache = forward_mlp(&spec, &params, &Mat::zeros(2, 4)).unwrap();
        assert!(cache.layers[0].a.as_slice().iter().all(|&v| v == 0.0));
        assert!(cache.layers[0].slope.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cnn_examples() {
        let spec = NetSpec::cnn(1, 3, &[(1, 2)], Activation::Relu, Head::SquaredError);
        let mut spec = spec;
        spec.layers[0].activation = Activation::Relu;
        let params = Params { layers: vec![Weights::Conv(Ten3::new([1, 1, 2], vec![1.0, 1.0]).unwrap())] };
        let x = Ten3::new([1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let cache = forward_cnn(&spec, &params, &x).unwrap();
        assert_eq!(cache.layers[0].a.as_slice(), &[3.0, 5.0]);
        assert_eq!(cache.layers[0].slope.as_slice(), &[1.0, 1.0]);

        let neg = Ten3::new([1, 1, 3], vec![-1.0, -2.0, 3.0]).unwrap();
        let cache = forward_cnn(&spec, &params, &neg).unwrap();
        assert_eq!(cache.layers[0].slope.as_slice(), &[0.0, 1.0]);

        // single-tap identity kernels reproduce the input
        let spec = NetSpec::cnn(2, 4, &[(2, 1), (2, 1)], Activation::Identity, Head::SquaredError);
        let eye = Ten3::new([2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let params = Params { layers: vec![Weights::Conv(eye.clone()), Weights::Conv(eye)] };
        let x = Ten3::new([1, 2, 4], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0, 2.0, 0.0]).unwrap();
        let cache = forward_cnn(&spec, &params, &x).unwrap();
        assert_eq!(cache.output().as_seq().unwrap(), &x);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = NetSpec::mlp(&[3, 2], Activation::Relu);
        let params = init_params(&spec, 0).unwrap();
        assert!(matches!(forward_mlp(&spec, &params, &Mat::zeros(1, 4)), Err(Error::Shape(_))));
        let x = Mat::from_rows(&[&[f64::NAN, 0.0, 0.0]]);
        assert!(matches!(forward_mlp(&spec, &params, &x), Err(Error::Diverged { .. })));
        let huge = Params { layers: vec![Weights::Dense(Mat::new(2, 3, vec![f64::MAX; 6]).unwrap())] };
        let x = Mat::from_rows(&[&[f64::MAX, f64::MAX, 1.0]]);
        assert_eq!(forward_mlp(&spec, &huge, &x).unwrap_err(), Error::Diverged { layer: 1 });
    }

    proptest! {
        #[test]
        fn cache_is_self_consistent(seed in 0u64..500, m in 1usize..5) {
            let spec = NetSpec::mlp(&[4, 6, 5, 3], Activation::LeakyRelu { slope: 0.2 });
            let params = init_params(&spec, seed).unwrap();
            let x = match init_params(&NetSpec::mlp(&[4, m], Activation::Relu), seed + 1).unwrap().layers.remove(0) {
                Weights::Dense(w) => w,
                Weights::Conv(_) => unreachable!(),
            };
            let cache = forward_mlp(&spec, &params, &x).unwrap();
            for (layer, c) in spec.layers.iter().zip(&cache.layers) {
                for ((z, a), s) in c.z.as_slice().iter().zip(c.a.as_slice()).zip(c.slope.as_slice()) {
                    prop_assert_eq!(*a, layer.activation.apply(*z));
                    prop_assert_eq!(*s, layer.activation.slope(*z));
                }
            }
        }

        #[test]
        fn one_linear_layer_is_homogeneous(seed in 0u64..500, s in -3.0f64..3.0) {
            let spec = one_layer(3, 2, Activation::Identity);
            let params = init_params(&spec, seed).unwrap();
            let x = Mat::from_rows(&[&[0.3, -1.2, 2.0], &[1.0, 0.5, -0.25]]);
            let base = forward_mlp(&spec, &params, &x).unwrap();
            let scaled = forward_mlp(&spec, &params, &x.scale(s)).unwrap();
            for (p, q) in scaled.output().as_slice().iter().zip(base.output().as_slice()) {
                prop_assert!((p - s * q).abs() <= 1e-12 * (1.0 + q.abs()));
            }
            prop_assert!(base.output().frobenius_norm() >= 0.0);
            prop_assert!(base.output().as_flat().unwrap().all_finite());
        }
    }
}

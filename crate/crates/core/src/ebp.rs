//! Plain error backpropagation with SGD, a finite-difference gradient check,
//! and a side-by-side run of BackMAN in its `c = 1` mode against SGD at rate 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backman::{apply_updates_mut, backward_backman, AlphaPolicy};
use crate::error::{input_err, Error, Result};
use crate::network::{
    forward, head_signal, init_params, propagate, weight_product, Batch, ForwardCache, NetSpec, Params, Targets,
    Weights,
};
use crate::tensor::max_rel_deviation;

/// Floor for relative-error denominators.
pub const REL_FLOOR: f64 = 1e-12;

/// `delta[l] = dloss/dz` and `grads[l] = dloss/dw` for every layer, first layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub deltas: Vec<Batch>,
    pub grads: Vec<Weights>,
}

/// Backprop signals `dloss/dz` for every layer.
pub fn deltas(params: &Params, cache: &ForwardCache, r_out: &Batch) -> Result<Vec<Batch>> {
    let depth = params.len();
    if cache.layers.len() != depth {
        return input_err(format!("cache has {} layers, params {depth}", cache.layers.len()));
    }
    let mut out = Vec::with_capacity(depth);
    let mut delta = r_out.scale(-1.0).hadamard(&cache.layers[depth - 1].slope)?;
    for l in (0..depth).rev() {
        if !delta.all_finite() {
            return Err(Error::Diverged { layer: l + 1 });
        }
        let next = if l > 0 {
            let back = propagate(&params.layers[l], &delta, cache.activation(l))?;
            Some(back.hadamard(&cache.layers[l - 1].slope)?)
        } else {
            None
        };
        out.push(delta);
        match next {
            Some(next) => delta = next,
            None => break,
        }
    }
    out.reverse();
    Ok(out)
}

pub fn backward_ebp(params: &Params, cache: &ForwardCache, r_out: &Batch) -> Result<GradSet> {
    let deltas = deltas(params, cache, r_out)?;
    let mut grads = Vec::with_capacity(deltas.len());
    for (l, d) in deltas.iter().enumerate() {
        let g = weight_product(&params.layers[l], d, cache.activation(l))?;
        if g.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { layer: l + 1 });
        }
        grads.push(g);
    }
    Ok(GradSet { deltas, grads })
}

/// `params - lr * grads`.
pub fn sgd_step(params: &Params, grads: &GradSet, lr: f64) -> Result<Params> {
    let mut next = params.clone();
    sgd_step_mut(&mut next, grads, lr)?;
    Ok(next)
}

pub fn sgd_step_mut(params: &mut Params, grads: &GradSet, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return input_err(format!("learning rate must be finite and non-negative, got {lr}"));
    }
    if grads.grads.len() != params.len() {
        return input_err("gradients and params have different depths");
    }
    for (w, g) in params.layers.iter_mut().zip(&grads.grads) {
        if w.dims() != g.dims() {
            return input_err(format!("gradient {:?} for weights {:?}", g.dims(), w.dims()));
        }
        for (v, d) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *v -= lr * d;
        }
    }
    Ok(())
}

/// One SGD iteration on a batch; returns the loss before the update.
pub fn ebp_iteration(spec: &NetSpec, params: &mut Params, x: &Batch, targets: &Targets, lr: f64) -> Result<f64> {
    let cache = forward(spec, params, x)?;
    let (loss, r_out) = head_signal(spec.head, cache.output(), targets)?;
    let grads = backward_ebp(params, &cache, &r_out)?;
    sgd_step_mut(params, &grads, lr)?;
    Ok(loss)
}

pub fn loss(spec: &NetSpec, params: &Params, x: &Batch, targets: &Targets) -> Result<f64> {
    let cache = forward(spec, params, x)?;
    Ok(head_signal(spec.head, cache.output(), targets)?.0)
}

/// Worst relative error between central differences and backprop gradients
/// over `probes` weights drawn with `seed`.
pub fn finite_difference_check(
    spec: &NetSpec,
    params: &Params,
    x: &Batch,
    targets: &Targets,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    if probes == 0 {
        return input_err("finite-difference check needs at least one probe");
    }
    if !(1e-8..=1e-4).contains(&h) {
        return input_err(format!("step {h} outside [1e-8, 1e-4]"));
    }
    let cache = forward(spec, params, x)?;
    let (_, r_out) = head_signal(spec.head, cache.output(), targets)?;
    let grads = backward_ebp(params, &cache, &r_out)?;
    let total = params.weight_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for _ in 0..probes {
        let mut idx = rng.random_range(0..total);
        let mut l = 0;
        while idx >= params.layers[l].as_slice().len() {
            idx -= params.layers[l].as_slice().len();
            l += 1;
        }
        let w0 = params.layers[l].as_slice()[idx];
        probe.layers[l].as_mut_slice()[idx] = w0 + h;
        let up = loss(spec, &probe, x, targets)?;
        probe.layers[l].as_mut_slice()[idx] = w0 - h;
        let down = loss(spec, &probe, x, targets)?;
        probe.layers[l].as_mut_slice()[idx] = w0;
        let fd = (up - down) / (2.0 * h);
        let an = grads.grads[l].as_slice()[idx];
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(REL_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Outcome of [`forced_c1_trajectory`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryReport {
    pub steps: usize,
    /// Worst relative weight deviation after each step.
    pub weight_deviation: Vec<f64>,
    /// Worst relative deviation between `g` and `-delta` at each step, over
    /// non-stalled agents.
    pub signal_deviation: Vec<f64>,
    pub stalled: usize,
}

impl TrajectoryReport {
    pub fn max_weight_deviation(&self) -> f64 {
        self.weight_deviation.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_signal_deviation(&self) -> f64 {
        self.signal_deviation.iter().copied().fold(0.0, f64::max)
    }
}

/// Trains two copies of the same network side by side: one with SGD at rate 1,
/// one with BackMAN where every agent's budget equals its own signal norm.
pub fn forced_c1_trajectory(
    spec: &NetSpec,
    seed: u64,
    x: &Batch,
    targets: &Targets,
    steps: usize,
) -> Result<TrajectoryReport> {
    let mut sgd = init_params(spec, seed)?;
    let mut agents = sgd.clone();
    let mut report = TrajectoryReport {
        steps,
        weight_deviation: Vec::with_capacity(steps),
        signal_deviation: Vec::with_capacity(steps),
        stalled: 0,
    };
    for _ in 0..steps {
        ebp_iteration(spec, &mut sgd, x, targets, 1.0)?;

        let cache = forward(spec, &agents, x)?;
        let (_, r_out) = head_signal(spec.head, cache.output(), targets)?;
        let signals = backward_backman(&agents, &cache, &r_out, &AlphaPolicy::MatchSignal)?;
        let ds = deltas(&agents, &cache, &r_out)?;
        let mut sig_dev = 0.0f64;
        for (s, d) in signals.layers.iter().zip(&ds) {
            // stalled agents are zeroed by design and sit outside the identity
            let mut keep = vec![-1.0; s.c.len()];
            s.stalled.iter().for_each(|&i| keep[i] = 0.0);
            let neg = d.scale_units(&keep);
            sig_dev = sig_dev.max(max_rel_deviation(s.g.as_slice(), neg.as_slice(), REL_FLOOR));
        }
        report.stalled += signals.stalled_count();
        apply_updates_mut(&mut agents, &signals)?;

        let mut w_dev = 0.0f64;
        for (a, b) in agents.layers.iter().zip(&sgd.layers) {
            w_dev = w_dev.max(max_rel_deviation(a.as_slice(), b.as_slice(), REL_FLOOR));
        }
        report.signal_deviation.push(sig_dev);
        report.weight_deviation.push(w_dev);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward_mlp, Activation, Head, Shape};
    use crate::tensor::{Mat, Ten3};
    use proptest::prelude::*;
    use rand::Rng;

    fn data(m: usize, n: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::new(m, n, (0..m * n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn linear_regression_closed_form() {
        // out = w.x, loss = (t - out)^2 / 2, dloss/dw = -(t - out) x
        let spec = NetSpec::mlp(&[3, 1], Activation::Relu).with_head(Head::SquaredError);
        let w = Mat::from_rows(&[&[0.5, -1.0, 2.0]]);
        let params = Params { layers: vec![Weights::Dense(w)] };
        let x = Mat::from_rows(&[&[1.0, 2.0, 3.0]]);
        let t = Targets::Values(Mat::from_rows(&[&[1.0]]));
        let cache = forward_mlp(&spec, &params, &x).unwrap();
        let out = 0.5 - 2.0 + 6.0;
        let (_, r) = head_signal(spec.head, cache.output(), &t).unwrap();
        let g = backward_ebp(&params, &cache, &r).unwrap();
        let want: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|v| -(1.0 - out) * v).collect();
        assert_eq!(g.grads[0].as_slice(), want.as_slice());
    }

    #[test]
    fn sgd_examples() {
        let spec = NetSpec::mlp(&[3, 4, 2], Activation::Relu);
        let params = init_params(&spec, 0).unwrap();
        let x = Batch::Flat(data(5, 3, 1));
        let cache = forward(&spec, &params, &x).unwrap();
        let (_, r) = head_signal(spec.head, cache.output(), &Targets::Classes(vec![0, 1, 0, 1, 1])).unwrap();
        let g = backward_ebp(&params, &cache, &r).unwrap();
        assert_eq!(sgd_step(&params, &g, 0.0).unwrap(), params);
        let full = sgd_step(&params, &g, 1.0).unwrap();
        for (l, w) in full.layers.iter().enumerate() {
            let want = params.layers[l].add_scaled(&g.grads[l], -1.0).unwrap();
            assert_eq!(w, &want);
        }
        let halves = sgd_step(&sgd_step(&params, &g, 0.5).unwrap(), &g, 0.5).unwrap();
        for (a, b) in halves.layers.iter().zip(&full.layers) {
            assert!(max_rel_deviation(a.as_slice(), b.as_slice(), 1e-12) <= 1e-12);
        }
        assert!(sgd_step(&params, &g, -1.0).is_err());
    }

    #[test]
    fn fd_check_inputs() {
        let spec = NetSpec::mlp(&[3, 2], Activation::Relu);
        let params = init_params(&spec, 0).unwrap();
        let x = Batch::Flat(data(4, 3, 2));
        let y = Targets::Classes(vec![0, 1, 1, 0]);
        assert!(finite_difference_check(&spec, &params, &x, &y, 0, 1e-6, 0).is_err());
        assert!(finite_difference_check(&spec, &params, &x, &y, 5, 1e-3, 0).is_err());
        // identity single layer with squared error: loss is quadratic in each weight
        let lin = spec.clone().with_head(Head::SquaredError);
        let t = Targets::Values(data(4, 2, 3));
        let err = finite_difference_check(&lin, &params, &x, &t, 6, 1e-6, 1).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn fd_dense_and_conv() {
        let spec = NetSpec::mlp(&[6, 8, 7, 4], Activation::Relu);
        let params = init_params(&spec, 11).unwrap();
        let x = Batch::Flat(data(10, 6, 12));
        let y = Targets::Classes((0..10).map(|s| s % 4).collect());
        let err = finite_difference_check(&spec, &params, &x, &y, 200, 1e-6, 5).unwrap();
        assert!(err <= 1e-4, "dense {err}");

        let spec = NetSpec::cnn(2, 7, &[(3, 3), (4, 2), (2, 2)], Activation::Relu, Head::SoftmaxCrossEntropy);
        let params = init_params(&spec, 13).unwrap();
        let x = Batch::Seq(data(5, 14, 14).into_ten3(2, 7).unwrap());
        let y = Targets::Classes(vec![0, 3, 5, 2, 1]);
        let err = finite_difference_check(&spec, &params, &x, &y, 200, 1e-6, 6).unwrap();
        assert!(err <= 1e-4, "conv {err}");
    }

    #[test]
    fn forced_mode_tracks_sgd() {
        let spec = NetSpec::mlp(&[6, 8, 7, 4], Activation::Relu);
        let x = Batch::Flat(data(12, 6, 20));
        let y = Targets::Classes((0..12).map(|s| (s * 7) % 4).collect());
        let one = forced_c1_trajectory(&spec, 3, &x, &y, 1).unwrap();
        assert!(one.max_weight_deviation() <= 1e-10);
        let run = forced_c1_trajectory(&spec, 3, &x, &y, 20).unwrap();
        assert!(run.max_weight_deviation() <= 1e-9, "{run:?}");
        assert!(run.max_signal_deviation() <= 1e-10, "{run:?}");
    }

    #[test]
    fn forced_mode_on_conv() {
        let spec = NetSpec::cnn(2, 6, &[(3, 2), (2, 2)], Activation::Relu, Head::SquaredError);
        let x = Batch::Seq(data(4, 12, 30).into_ten3(2, 6).unwrap());
        let t = Targets::Values(data(4, 8, 31));
        let run = forced_c1_trajectory(&spec, 1, &x, &t, 5).unwrap();
        assert!(run.max_weight_deviation() <= 1e-10, "{run:?}");
        assert!(run.max_signal_deviation() <= 1e-10, "{run:?}");
    }

    #[test]
    fn zero_input_is_a_fixpoint() {
        let spec = NetSpec::mlp(&[4, 5, 3], Activation::Relu);
        let x = Batch::Flat(Mat::zeros(3, 4));
        let y = Targets::Classes(vec![0, 1, 2]);
        let run = forced_c1_trajectory(&spec, 0, &x, &y, 4).unwrap();
        assert_eq!(run.max_weight_deviation(), 0.0);
        let mut p = init_params(&spec, 0).unwrap();
        let p0 = p.clone();
        ebp_iteration(&spec, &mut p, &x, &y, 1.0).unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let spec = NetSpec { input: Shape::Flat(3), ..NetSpec::mlp(&[3, 8, 2], Activation::Relu) };
        let raw = data(40, 2, 40);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for s in 0..40 {
            let (a, b) = (raw.get(s, 0), raw.get(s, 1));
            rows.extend_from_slice(&[a, b, 1.0]);
            labels.push(usize::from(a + b > 0.0));
        }
        let x = Batch::Flat(Mat::new(40, 3, rows).unwrap());
        let y = Targets::Classes(labels);
        let mut p = init_params(&spec, 2).unwrap();
        let losses: Vec<f64> = (0..50).map(|_| ebp_iteration(&spec, &mut p, &x, &y, 0.2).unwrap()).collect();
        let windows: Vec<f64> = losses.chunks(5).map(|c| c.iter().sum::<f64>() / 5.0).collect();
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    }

    proptest! {
        #[test]
        fn lemma_identity_on_random_nets(seed in 0u64..300) {
            let spec = NetSpec::mlp(&[4, 6, 5, 3], Activation::LeakyRelu { slope: 0.1 });
            let params = init_params(&spec, seed).unwrap();
            let x = data(6, 4, seed + 1);
            let cache = forward_mlp(&spec, &params, &x).unwrap();
            let (_, r) = head_signal(spec.head, cache.output(), &Targets::Classes(vec![0, 1, 2, 0, 1, 2])).unwrap();
            let s = backward_backman(&params, &cache, &r, &AlphaPolicy::MatchSignal).unwrap();
            let g = backward_ebp(&params, &cache, &r).unwrap();
            for (l, layer) in s.layers.iter().enumerate() {
                for (a, b) in layer.g.as_slice().iter().zip(g.deltas[l].as_slice()) {
                    prop_assert_eq!(*a, -b);
                }
                for (a, b) in layer.step.as_slice().iter().zip(g.grads[l].as_slice()) {
                    prop_assert_eq!(*a, -b);
                }
            }
        }

        #[test]
        fn conv_shapes_mirror_params(seed in 0u64..100) {
            let spec = NetSpec::cnn(2, 6, &[(3, 2), (2, 3)], Activation::Relu, Head::SquaredError);
            let params = init_params(&spec, seed).unwrap();
            let x = Batch::Seq(Ten3::new([2, 2, 6], data(2, 12, seed).into_vec()).unwrap());
            let cache = forward(&spec, &params, &x).unwrap();
            let t = Targets::Values(Mat::zeros(2, 6));
            let (_, r) = head_signal(spec.head, cache.output(), &t).unwrap();
            let g = backward_ebp(&params, &cache, &r).unwrap();
            for (w, d) in params.layers.iter().zip(&g.grads) {
                prop_assert_eq!(w.dims(), d.dims());
            }
        }
    }
}

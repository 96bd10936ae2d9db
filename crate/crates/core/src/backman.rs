//! The BackMAN backward pass: every neuron (dense) or filter (conv) is an agent
//! that rescales its backpropagated signal so its own weight change has norm
//! exactly `alpha`.
//!
//! For layer `l`, with `r` the incoming signal over pre-activations:
//!
//! ```text
//! c_i   = alpha_i / |P_i|         P = r^T a_prev  (dense) or psi(r, a_prev) (conv)
//! g     = r diag(c)
//! dw_i  = c_i P_i                  (= g^T a_prev, resp. psi(g, a_prev))
//! r_prev = (g w) * M_prev          (dense) or ConvT(g, w) * M_prev (conv)
//! ```
//!
//! Agents with `|P_i| < STALL_EPS` are stalled: `c_i = 0` and they do not move.

use crate::ebp;
use crate::error::{input_err, Error, Result};
use crate::network::{
    forward, head_signal, propagate, weight_product, Batch, ForwardCache, NetSpec, Params, Targets, Weights,
};

/// Denominators below this mark an agent as stalled.
pub const STALL_EPS: f64 = 1e-30;

/// How the update budget `alpha` is chosen for each agent.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaPolicy {
    /// One budget for every agent.
    Fixed(f64),
    /// One budget per layer, first layer first.
    PerLayer(Vec<f64>),
    /// Per-layer budget set so `|g|_F = eta * |delta|_F`, with `delta` the
    /// plain backprop signal of the same layer.
    Dynamic { eta: f64 },
    /// `alpha_i = |P_i|`, which makes every `c_i` exactly 1. The update is then
    /// plain gradient descent with rate 1.
    MatchSignal,
}

impl AlphaPolicy {
    pub fn validate(&self, layers: usize) -> Result<()> {
        let check = |v: f64, what: &str| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                input_err(format!("{what} must be finite and non-negative, got {v}"))
            }
        };
        match self {
            AlphaPolicy::Fixed(a) => check(*a, "alpha"),
            AlphaPolicy::PerLayer(v) => {
                if v.len() != layers {
                    return input_err(format!("{} alphas for {layers} layers", v.len()));
                }
                v.iter().try_for_each(|&a| check(a, "alpha"))
            }
            AlphaPolicy::Dynamic { eta } => check(*eta, "eta"),
            AlphaPolicy::MatchSignal => Ok(()),
        }
    }
}

/// Signals of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSignals {
    /// Unnormalized signal over the layer's pre-activations.
    pub r: Batch,
    pub c: Vec<f64>,
    /// `r` with unit `i` scaled by `c_i`.
    pub g: Batch,
    /// Budget applied to each agent.
    pub alpha: Vec<f64>,
    /// `|P_i|`, the norm each agent normalizes by.
    pub denom: Vec<f64>,
    pub stalled: Vec<usize>,
    /// Weight change for the layer.
    pub step: Weights,
}

/// One row of the per-agent diagnostics stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentRecord {
    /// 1-based layer index.
    pub layer: usize,
    pub agent: usize,
    pub alpha: f64,
    pub c: f64,
    pub denom: f64,
    pub g_norm: f64,
    pub r_norm: f64,
    pub stalled: bool,
}

impl LayerSignals {
    pub fn records(&self, layer: usize) -> Vec<AgentRecord> {
        let g_norms = self.g.unit_norms();
        let r_norms = self.r.unit_norms();
        (0..self.c.len())
            .map(|i| AgentRecord {
                layer,
                agent: i,
                alpha: self.alpha[i],
                c: self.c[i],
                denom: self.denom[i],
                g_norm: g_norms[i],
                r_norm: r_norms[i],
                stalled: self.stalled.binary_search(&i).is_ok(),
            })
            .collect()
    }
}

/// Signals for every layer; `layers[0]` is the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BackSignals {
    pub layers: Vec<LayerSignals>,
}

impl BackSignals {
    pub fn stalled_count(&self) -> usize {
        self.layers.iter().map(|l| l.stalled.len()).sum()
    }

    pub fn records(&self) -> Vec<AgentRecord> {
        self.layers.iter().enumerate().flat_map(|(l, s)| s.records(l + 1)).collect()
    }
}

/// `alpha / denom`, or `None` when the agent is stalled.
pub fn compute_c(alpha: f64, denom: f64) -> Option<f64> {
    if denom < STALL_EPS || !denom.is_finite() {
        None
    } else {
        Some(alpha / denom)
    }
}

/// Layer budget for the dynamic policy: `eta * |delta|_F / |g(alpha = 1)|_F`,
/// with stalled agents left out and 0 when nothing can move.
pub fn dynamic_alpha(w: &Weights, r: &Batch, a_prev: &Batch, delta: &Batch, eta: f64) -> Result<f64> {
    let denoms = weight_product(w, r, a_prev)?.agent_norms();
    let c: Vec<f64> = denoms.iter().map(|&d| compute_c(1.0, d).unwrap_or(0.0)).collect();
    let s = r.scale_units(&c).frobenius_norm();
    Ok(if s < STALL_EPS { 0.0 } else { eta * delta.frobenius_norm() / s })
}

/// Runs the backward pass without touching `params` or `cache`.
///
/// `r_out` is the head signal `-dloss/d(output)`; it is masked by the last
/// layer's slopes to give `r` of the last layer.
pub fn backward_backman(
    params: &Params,
    cache: &ForwardCache,
    r_out: &Batch,
    policy: &AlphaPolicy,
) -> Result<BackSignals> {
    let depth = params.len();
    if cache.layers.len() != depth {
        return input_err(format!("cache has {} layers, params {depth}", cache.layers.len()));
    }
    policy.validate(depth)?;
    let deltas = match policy {
        AlphaPolicy::Dynamic { .. } => Some(ebp::deltas(params, cache, r_out)?),
        _ => None,
    };

    // r = scale * r_hat. When a layer shares one budget A, g = A * r_hat / |P_hat|,
    // so the budget leaves the propagated signal as a pure scalar factor and
    // scaling every budget scales g and the steps exactly.
    let mut out: Vec<LayerSignals> = Vec::with_capacity(depth);
    let mut r_hat = r_out.hadamard(&cache.layers[depth - 1].slope)?;
    let mut scale = 1.0;
    for l in (0..depth).rev() {
        let w = &params.layers[l];
        let a_prev = cache.activation(l);
        let mut product = weight_product(w, &r_hat, a_prev)?;
        let d_hat = product.agent_norms();
        let n = d_hat.len();
        let denom: Vec<f64> = if scale == 1.0 { d_hat.clone() } else { d_hat.iter().map(|d| scale * d).collect() };
        let stalled: Vec<usize> = (0..n).filter(|&i| compute_c(1.0, denom[i]).is_none()).collect();
        let mut inv: Vec<f64> = d_hat.iter().map(|d| 1.0 / d).collect();
        for &i in &stalled {
            inv[i] = 0.0;
        }
        let shared = match policy {
            AlphaPolicy::Fixed(a) => Some(*a),
            AlphaPolicy::PerLayer(v) => Some(v[l]),
            AlphaPolicy::Dynamic { eta } => {
                let delta = &deltas.as_ref().expect("computed above")[l];
                let s = r_hat.scale_units(&inv).frobenius_norm();
                Some(if s < STALL_EPS { 0.0 } else { eta * delta.frobenius_norm() / s })
            }
            AlphaPolicy::MatchSignal => None,
        };
        let r = if scale == 1.0 { r_hat.clone() } else { r_hat.scale(scale) };
        let (alpha, c, g, carried, next_scale) = match shared {
            Some(a) => {
                let c: Vec<f64> = (0..n).map(|i| if inv[i] == 0.0 { 0.0 } else { a / denom[i] }).collect();
                let g_hat = r_hat.scale_units(&inv);
                let g = g_hat.scale(a);
                for (i, &f) in inv.iter().enumerate() {
                    product.agent_mut(i).iter_mut().for_each(|v| *v = *v * f * a);
                }
                (vec![a; n], c, g, g_hat, a)
            }
            None => {
                let alpha = denom.clone();
                let mut c = vec![0.0; n];
                for i in 0..n {
                    c[i] = compute_c(alpha[i], denom[i]).unwrap_or(0.0);
                }
                let g = r.scale_units(&c);
                for (i, &ci) in c.iter().enumerate() {
                    let f = if scale == 1.0 { ci } else { ci * scale };
                    product.agent_mut(i).iter_mut().for_each(|v| *v *= f);
                }
                let carried = g.clone();
                (alpha, c, g, carried, 1.0)
            }
        };
        let step = product;
        if !g.all_finite() || step.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { layer: l + 1 });
        }
        let next =
            if l > 0 { Some(propagate(w, &carried, a_prev)?.hadamard(&cache.layers[l - 1].slope)?) } else { None };
        out.push(LayerSignals { r, c, g, alpha, denom, stalled, step });
        match next {
            Some(next) => {
                r_hat = next;
                scale = next_scale;
            }
            None => break,
        }
    }
    out.reverse();
    Ok(BackSignals { layers: out })
}

/// [`backward_backman`] for a network fed flat inputs.
pub fn backward_backman_mlp(
    params: &Params,
    cache: &ForwardCache,
    r_out: &Batch,
    policy: &AlphaPolicy,
) -> Result<BackSignals> {
    if !matches!(cache.input, Batch::Flat(_)) {
        return input_err("MLP backward pass needs a flat input batch");
    }
    backward_backman(params, cache, r_out, policy)
}

/// [`backward_backman`] for a network fed sequence inputs.
pub fn backward_backman_cnn(
    params: &Params,
    cache: &ForwardCache,
    r_out: &Batch,
    policy: &AlphaPolicy,
) -> Result<BackSignals> {
    if !matches!(cache.input, Batch::Seq(_)) {
        return input_err("CNN backward pass needs a sequence input batch");
    }
    backward_backman(params, cache, r_out, policy)
}

/// `params + step` for every layer.
pub fn apply_updates(params: &Params, signals: &BackSignals) -> Result<Params> {
    let mut next = params.clone();
    apply_updates_mut(&mut next, signals)?;
    Ok(next)
}

pub fn apply_updates_mut(params: &mut Params, signals: &BackSignals) -> Result<()> {
    if signals.layers.len() != params.len() {
        return input_err("signals and params have different depths");
    }
    for (w, s) in params.layers.iter_mut().zip(&signals.layers) {
        if w.dims() != s.step.dims() {
            return input_err(format!("step {:?} for weights {:?}", s.step.dims(), w.dims()));
        }
        for (v, d) in w.as_mut_slice().iter_mut().zip(s.step.as_slice()) {
            *v += d;
        }
    }
    Ok(())
}

/// One forward, backward and update on a batch. Returns the loss before the
/// update and the signals used.
pub fn backman_iteration(
    spec: &NetSpec,
    params: &mut Params,
    x: &Batch,
    targets: &Targets,
    policy: &AlphaPolicy,
) -> Result<(f64, BackSignals)> {
    let cache = forward(spec, params, x)?;
    let (loss, r_out) = head_signal(spec.head, cache.output(), targets)?;
    let signals = backward_backman(params, &cache, &r_out, policy)?;
    apply_updates_mut(params, &signals)?;
    Ok((loss, signals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward_cnn, forward_mlp, init_params, Activation, Head};
    use crate::tensor::{matmul_naive, Mat, Ten3};
    use proptest::prelude::*;

    fn setup(seed: u64) -> (NetSpec, Params, ForwardCache, Batch) {
        let spec = NetSpec::mlp(&[5, 7, 6, 3], Activation::Relu);
        let params = init_params(&spec, seed).unwrap();
        let x = init_params(&NetSpec::mlp(&[5, 9], Activation::Relu), seed + 100).unwrap();
        let x = match &x.layers[0] {
            Weights::Dense(w) => w.scale(3.0),
            Weights::Conv(_) => unreachable!(),
        };
        let cache = forward_mlp(&spec, &params, &x).unwrap();
        let y: Vec<usize> = (0..9).map(|s| s % 3).collect();
        let (_, r) = head_signal(spec.head, cache.output(), &Targets::Classes(y)).unwrap();
        (spec, params, cache, r)
    }

    #[test]
    fn c_examples() {
        // r_i = [3, 4] over two samples with a = I: r^T a = [3, 4], norm 5.
        let r = Batch::Flat(Mat::from_rows(&[&[3.0], &[4.0]]));
        let a = Batch::Flat(Mat::identity(2));
        let w = Weights::Dense(Mat::zeros(1, 2));
        let p = weight_product(&w, &r, &a).unwrap();
        assert_eq!(p.as_slice(), &[3.0, 4.0]);
        assert_eq!(compute_c(1.0, p.agent_norms()[0]), Some(0.2));
        assert_eq!(compute_c(5.0, 5.0), Some(1.0));
        assert_eq!(compute_c(1.0, 0.0), None);
        assert_eq!(compute_c(1.0, 1e-31), None);
    }

    #[test]
    fn outer_product_update() {
        // g = [[0.5]], a = [[1, 2]] -> dw = [[0.5, 1.0]]
        let spec = NetSpec::mlp(&[2, 1], Activation::Relu).with_head(Head::SquaredError);
        let params = Params { layers: vec![Weights::Dense(Mat::zeros(1, 2))] };
        let cache = forward_mlp(&spec, &params, &Mat::from_rows(&[&[1.0, 2.0]])).unwrap();
        let r = Batch::Flat(Mat::from_rows(&[&[0.5]]));
        let alpha = 0.5 * 5f64.sqrt();
        let s = backward_backman(&params, &cache, &r, &AlphaPolicy::Fixed(alpha)).unwrap();
        assert!((s.layers[0].c[0] - 1.0).abs() < 1e-15);
        let next = apply_updates(&params, &s).unwrap();
        let got = next.layers[0].as_slice();
        assert!((got[0] - 0.5).abs() < 1e-15 && (got[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_signal_stalls_everything() {
        let (_, params, cache, r) = setup(2);
        let zero = r.zeros_like();
        let s = backward_backman(&params, &cache, &zero, &AlphaPolicy::Fixed(0.1)).unwrap();
        assert_eq!(s.stalled_count(), 7 + 6 + 3);
        assert_eq!(apply_updates(&params, &s).unwrap(), params);
        assert!(s.layers.iter().all(|l| l.g.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn signals_follow_their_definitions() {
        let (_, params, cache, r_out) = setup(4);
        let s = backward_backman(&params, &cache, &r_out, &AlphaPolicy::Fixed(0.03)).unwrap();
        for (l, layer) in s.layers.iter().enumerate() {
            let a = cache.activation(l).as_flat().unwrap();
            let r = layer.r.as_flat().unwrap();
            // denominators from a naive r^T a
            let p = matmul_naive(&r.transpose(), a).unwrap();
            for (i, d) in p.row_norms().iter().enumerate() {
                assert!((d - layer.denom[i]).abs() <= 1e-12 * d.max(1e-300));
            }
            // g column i = c_i r column i
            let g = layer.g.as_flat().unwrap();
            for s_ in 0..g.rows() {
                for i in 0..g.cols() {
                    let want = r.get(s_, i) * layer.c[i];
                    assert!((g.get(s_, i) - want).abs() <= 1e-14 * want.abs());
                }
            }
            // step = g^T a
            let gta = matmul_naive(&g.transpose(), a).unwrap();
            for (x, y) in layer.step.as_slice().iter().zip(gta.as_slice()) {
                assert!((x - y).abs() <= 1e-12 * (1e-3 + y.abs()));
            }
        }
        // r of a lower layer is (g w) masked by slopes
        let g2 = s.layers[1].g.as_flat().unwrap();
        let w2 = match &params.layers[1] {
            Weights::Dense(w) => w,
            Weights::Conv(_) => unreachable!(),
        };
        let back = matmul_naive(g2, w2).unwrap();
        let mask = cache.layers[0].slope.as_flat().unwrap();
        let want = back.hadamard(mask).unwrap();
        for (x, y) in s.layers[0].r.as_slice().iter().zip(want.as_slice()) {
            assert!((x - y).abs() <= 1e-13 * (1e-3 + y.abs()));
        }
    }

    #[test]
    fn one_layer_budget_is_met() {
        let spec = NetSpec::mlp(&[4, 3], Activation::Relu);
        let params = init_params(&spec, 8).unwrap();
        let x = Mat::from_rows(&[&[1.0, -0.5, 2.0, 0.0], &[0.3, 0.3, -1.0, 1.5]]);
        let cache = forward_mlp(&spec, &params, &x).unwrap();
        let (_, r) = head_signal(spec.head, cache.output(), &Targets::Classes(vec![2, 0])).unwrap();
        let s = backward_backman(&params, &cache, &r, &AlphaPolicy::Fixed(0.7)).unwrap();
        let g = s.layers[0].g.as_flat().unwrap();
        let gta = matmul_naive(&g.transpose(), &x).unwrap();
        for n in gta.row_norms() {
            assert!((n - 0.7).abs() <= 1e-12);
        }
    }

    #[test]
    fn per_layer_alphas_are_used() {
        let (_, params, cache, r) = setup(5);
        let policy = AlphaPolicy::PerLayer(vec![0.1, 0.2, 0.3]);
        let s = backward_backman(&params, &cache, &r, &policy).unwrap();
        for (l, want) in [0.1, 0.2, 0.3].iter().enumerate() {
            for (i, n) in s.layers[l].step.agent_norms().iter().enumerate() {
                if !s.layers[l].stalled.contains(&i) {
                    assert!((n - want).abs() <= 1e-12);
                }
            }
        }
        assert!(backward_backman(&params, &cache, &r, &AlphaPolicy::PerLayer(vec![0.1])).is_err());
        assert!(backward_backman(&params, &cache, &r, &AlphaPolicy::Fixed(f64::NAN)).is_err());
    }

    #[test]
    fn match_signal_gives_unit_c() {
        let (_, params, cache, r) = setup(6);
        let s = backward_backman(&params, &cache, &r, &AlphaPolicy::MatchSignal).unwrap();
        for layer in &s.layers {
            for (i, &c) in layer.c.iter().enumerate() {
                if !layer.stalled.contains(&i) {
                    assert_eq!(c, 1.0);
                }
            }
        }
        // last layer: g = r_out masked by the identity slope, bitwise
        assert_eq!(s.layers[2].g, r);
    }

    #[test]
    fn dynamic_alpha_matches_backprop_norm() {
        let (_, params, cache, r) = setup(7);
        let deltas = ebp::deltas(&params, &cache, &r).unwrap();
        for eta in [1.0, 0.5, 0.05] {
            let s = backward_backman(&params, &cache, &r, &AlphaPolicy::Dynamic { eta }).unwrap();
            for (l, layer) in s.layers.iter().enumerate() {
                let want = eta * deltas[l].frobenius_norm();
                let got = layer.g.frobenius_norm();
                assert!((got - want).abs() <= 1e-10 * want.max(1e-300), "layer {l}: {got} vs {want}");
                let direct = dynamic_alpha(&params.layers[l], &layer.r, cache.activation(l), &deltas[l], eta).unwrap();
                assert!((direct - layer.alpha[0]).abs() <= 1e-12 * direct);
            }
        }
        // halving eta halves alpha
        let full = backward_backman(&params, &cache, &r, &AlphaPolicy::Dynamic { eta: 1.0 }).unwrap();
        let half = backward_backman(&params, &cache, &r, &AlphaPolicy::Dynamic { eta: 0.5 }).unwrap();
        let top = full.layers.len() - 1;
        assert_eq!(half.layers[top].alpha[0], 0.5 * full.layers[top].alpha[0]);
        // fixed point: eta = 1 and |g(alpha=1)| = |delta| gives alpha = 1
        let w = Weights::Dense(Mat::zeros(2, 1));
        let one = Batch::Flat(Mat::from_rows(&[&[3.0, 4.0]]));
        let a = Batch::Flat(Mat::from_rows(&[&[1.0]]));
        let delta = Batch::Flat(Mat::from_rows(&[&[-1.0, 1.0]]));
        // g(alpha = 1) = [1, 1], |g| = |delta| = sqrt 2
        assert_eq!(dynamic_alpha(&w, &one, &a, &delta, 1.0).unwrap(), 1.0);
        assert_eq!(dynamic_alpha(&w, &one.zeros_like(), &a, &delta, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn single_tap_conv_matches_dense() {
        // A conv net with k = 1 and length 1 is a dense net on the channels.
        let cspec = NetSpec::cnn(3, 1, &[(4, 1), (2, 1)], Activation::Relu, Head::SoftmaxCrossEntropy);
        let dspec = NetSpec::mlp(&[3, 4, 2], Activation::Relu);
        let dparams = init_params(&dspec, 3).unwrap();
        let cparams = Params {
            layers: dparams
                .layers
                .iter()
                .map(|w| match w {
                    Weights::Dense(m) => Weights::Conv(m.clone().into_ten3(m.cols(), 1).unwrap()),
                    Weights::Conv(_) => unreachable!(),
                })
                .collect(),
        };
        let x = Mat::from_rows(&[&[1.0, -2.0, 0.5], &[0.1, 0.2, 0.3], &[-1.0, 1.0, 2.0]]);
        let y = Targets::Classes(vec![0, 1, 1]);
        let dc = forward_mlp(&dspec, &dparams, &x).unwrap();
        let cc = forward_cnn(&cspec, &cparams, &x.clone().into_ten3(3, 1).unwrap()).unwrap();
        let (_, dr) = head_signal(dspec.head, dc.output(), &y).unwrap();
        let (_, cr) = head_signal(cspec.head, cc.output(), &y).unwrap();
        let ds = backward_backman(&dparams, &dc, &dr, &AlphaPolicy::Fixed(0.2)).unwrap();
        let cs = backward_backman(&cparams, &cc, &cr, &AlphaPolicy::Fixed(0.2)).unwrap();
        for (d, c) in ds.layers.iter().zip(&cs.layers) {
            assert_eq!(d.c, c.c);
            assert_eq!(d.g.as_slice(), c.g.as_slice());
            assert_eq!(d.step.as_slice(), c.step.as_slice());
        }
    }

    #[test]
    fn conv_zero_signal_and_budget() {
        let spec = NetSpec::cnn(2, 6, &[(3, 2), (2, 2)], Activation::Relu, Head::SquaredError);
        let params = init_params(&spec, 1).unwrap();
        let x = Ten3::new([4, 2, 6], (0..48).map(|v| ((v * 37 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
        let cache = forward_cnn(&spec, &params, &x).unwrap();
        let t = Targets::Values(Mat::zeros(4, 8));
        let (_, r) = head_signal(spec.head, cache.output(), &t).unwrap();
        let s = backward_backman_cnn(&params, &cache, &r, &AlphaPolicy::Fixed(0.05)).unwrap();
        for layer in &s.layers {
            for (i, n) in layer.step.agent_norms().iter().enumerate() {
                if !layer.stalled.contains(&i) {
                    assert!((n - 0.05).abs() <= 1e-12);
                }
            }
        }
        let z = backward_backman_cnn(&params, &cache, &r.zeros_like(), &AlphaPolicy::Fixed(0.05)).unwrap();
        assert_eq!(z.stalled_count(), 5);
        assert!(backward_backman_mlp(&params, &cache, &r, &AlphaPolicy::Fixed(0.05)).is_err());
    }

    proptest! {
        #[test]
        fn update_norm_equals_budget(seed in 0u64..200, alpha in 1e-4f64..2.0) {
            let (_, params, cache, r) = setup(seed);
            let s = backward_backman(&params, &cache, &r, &AlphaPolicy::Fixed(alpha)).unwrap();
            for layer in &s.layers {
                for (i, n) in layer.step.agent_norms().iter().enumerate() {
                    if layer.stalled.contains(&i) {
                        prop_assert_eq!(*n, 0.0);
                    } else {
                        prop_assert!((n - alpha).abs() <= 1e-9);
                        prop_assert!(layer.c[i] > 0.0);
                    }
                }
            }
        }

        #[test]
        fn alpha_scales_signals_linearly(seed in 0u64..200, alpha in 1e-3f64..1.0, k in 0.1f64..10.0) {
            let (_, params, cache, r) = setup(seed);
            let a = backward_backman(&params, &cache, &r, &AlphaPolicy::Fixed(alpha)).unwrap();
            let b = backward_backman(&params, &cache, &r, &AlphaPolicy::Fixed(k * alpha)).unwrap();
            let last = a.layers.len() - 1;
            for (l, (x, y)) in a.layers.iter().zip(&b.layers).enumerate() {
                for (p, q) in x.g.as_slice().iter().zip(y.g.as_slice()) {
                    prop_assert!((q - k * p).abs() <= 1e-12 * (k * p).abs().max(1e-300));
                }
                for (p, q) in x.step.as_slice().iter().zip(y.step.as_slice()) {
                    prop_assert!((q - k * p).abs() <= 1e-12 * (k * p).abs().max(1e-300));
                }
                if l != last {
                    for (p, q) in x.c.iter().zip(&y.c) {
                        prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1e-300));
                    }
                }
            }
        }

        #[test]
        fn backward_is_read_only_and_update_idempotent(seed in 0u64..100) {
            let (_, params, cache, r) = setup(seed);
            let (p0, c0) = (params.clone(), cache.clone());
            let s = backward_backman(&params, &cache, &r, &AlphaPolicy::Fixed(0.1)).unwrap();
            prop_assert_eq!(&params, &p0);
            prop_assert_eq!(&cache, &c0);
            prop_assert_eq!(apply_updates(&params, &s).unwrap(), apply_updates(&params, &s).unwrap());
        }
    }
}

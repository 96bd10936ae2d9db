//! Brute-force best responses.
//!
//! Starting from a network at iteration `tau - 1`, every agent takes its
//! BackMAN step except one agent `(l, i)`, which takes a candidate step `b`
//! with `|b| <= alpha`. The network then runs one more BackMAN iteration. The
//! candidate is scored by the agent's utility:
//!
//! - hidden agent: norm of its outgoing weights `w[l+1][:, i]` after that iteration;
//! - last-layer agent: minus the loss right after the candidate step.
//!
//! A search over the ball finds the best candidate, which is compared with the
//! BackMAN step.
//!
//! [`RolloutMode::FrozenSignal`] replaces the second iteration's `g[l+1]` by
//! its value on the all-BackMAN trajectory, so the candidate only acts through
//! the agent's own outputs. That is the idealization the convergence argument
//! for hidden agents relies on; the full rollout lets `g[l+1]` react to `b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backman::{apply_updates_mut, backward_backman, AlphaPolicy, BackSignals};
use crate::error::{input_err, Result};
use crate::network::{
    forward, head_signal, init_params, weight_product, Activation, Batch, NetSpec, Params, Shape, Targets,
};
use crate::tensor::{Mat, Ten3};

/// A network frozen at iteration `tau - 1`, with everyone's BackMAN step.
#[derive(Debug, Clone)]
pub struct NashState {
    pub spec: NetSpec,
    pub params: Params,
    pub x: Batch,
    pub targets: Targets,
    pub alpha: f64,
    signals: BackSignals,
    /// `g` of every layer in the second iteration of the all-BackMAN run.
    next_g: Vec<Batch>,
}

/// How the second iteration of a rollout is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RolloutMode {
    /// Exact two-iteration rollout.
    #[default]
    Full,
    /// Second-iteration `g[l+1]` held at its all-BackMAN value.
    FrozenSignal,
}

impl NashState {
    pub fn new(spec: NetSpec, params: Params, x: Batch, targets: Targets, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return input_err(format!("alpha must be positive, got {alpha}"));
        }
        let cache = forward(&spec, &params, &x)?;
        let (_, r_out) = head_signal(spec.head, cache.output(), &targets)?;
        let policy = AlphaPolicy::Fixed(alpha);
        let signals = backward_backman(&params, &cache, &r_out, &policy)?;
        let mut next = params.clone();
        apply_updates_mut(&mut next, &signals)?;
        let cache = forward(&spec, &next, &x)?;
        let (_, r_out) = head_signal(spec.head, cache.output(), &targets)?;
        let next_g = backward_backman(&next, &cache, &r_out, &policy)?.layers.into_iter().map(|l| l.g).collect();
        Ok(NashState { spec, params, x, targets, alpha, signals, next_g })
    }

    /// BackMAN step of agent `i` in layer `l` (0-based).
    pub fn backman_response(&self, l: usize, i: usize) -> &[f64] {
        self.signals.layers[l].step.agent(i)
    }

    pub fn is_stalled(&self, l: usize, i: usize) -> bool {
        self.signals.layers[l].stalled.contains(&i)
    }

    pub fn depth(&self) -> usize {
        self.params.len()
    }

    pub fn agents(&self, l: usize) -> usize {
        self.params.layers[l].agents()
    }

    /// Rejects states where a hidden output is exactly zero, i.e. sits on an
    /// activation breakpoint or violates the nonzero-output assumption.
    pub fn check_hypotheses(&self) -> Result<()> {
        let cache = forward(&self.spec, &self.params, &self.x)?;
        for (l, (layer, c)) in self.spec.layers.iter().zip(&cache.layers).enumerate() {
            if l + 1 == self.depth() {
                continue;
            }
            if c.z.as_slice().iter().any(|&z| layer.activation.is_breakpoint(z)) {
                return input_err(format!("layer {}: pre-activation on a breakpoint", l + 1));
            }
            if c.a.as_slice().contains(&0.0) {
                return input_err(format!("layer {}: zero hidden output", l + 1));
            }
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Utility of agent `(l, i)` when it takes step `b` and everyone else follows BackMAN.
pub fn rollout_utility(state: &NashState, l: usize, i: usize, b: &[f64]) -> Result<f64> {
    rollout_utility_with(state, l, i, b, RolloutMode::Full)
}

pub fn rollout_utility_with(state: &NashState, l: usize, i: usize, b: &[f64], mode: RolloutMode) -> Result<f64> {
    if l >= state.depth() || i >= state.agents(l) {
        return input_err(format!("no agent {i} in layer {}", l + 1));
    }
    let own = state.params.layers[l].agent(i);
    if b.len() != own.len() {
        return input_err(format!("step has {} entries, agent has {}", b.len(), own.len()));
    }
    if norm(b) > state.alpha * (1.0 + 1e-12) {
        return input_err(format!("step norm {} exceeds alpha {}", norm(b), state.alpha));
    }
    let mut p = state.params.clone();
    apply_updates_mut(&mut p, &state.signals)?;
    for ((dst, w), d) in p.layers[l].agent_mut(i).iter_mut().zip(own).zip(b) {
        *dst = w + d;
    }
    let cache = forward(&state.spec, &p, &state.x)?;
    let (loss, r_out) = head_signal(state.spec.head, cache.output(), &state.targets)?;
    if l + 1 == state.depth() {
        return Ok(-loss);
    }
    if mode == RolloutMode::FrozenSignal {
        let w = &p.layers[l + 1];
        let step = weight_product(w, &state.next_g[l + 1], cache.activation(l + 1))?;
        let after: Vec<f64> = w.outgoing(i).iter().zip(step.outgoing(i)).map(|(a, d)| a + d).collect();
        return Ok(norm(&after));
    }
    let next = backward_backman(&p, &cache, &r_out, &AlphaPolicy::Fixed(state.alpha))?;
    apply_updates_mut(&mut p, &next)?;
    Ok(norm(&p.layers[l + 1].outgoing(i)))
}

/// Outcome of one best-response search.
#[derive(Debug, Clone, PartialEq)]
pub struct BestResponseReport {
    /// 1-based layer.
    pub layer: usize,
    pub agent: usize,
    pub alpha: f64,
    pub cosine: f64,
    pub norm_ratio: f64,
    pub samples: usize,
    pub refinements: usize,
    pub rollouts: usize,
    pub utility: f64,
    pub backman_utility: f64,
    /// False when the agent is stalled and has no BackMAN direction.
    pub valid: bool,
}

fn project(v: &mut [f64], alpha: f64) {
    let n = norm(v);
    if n > alpha {
        let s = alpha / n;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

/// Maximizes the rollout utility over the `alpha`-ball with `budget` rollouts:
/// 60% random points (half on the sphere, half inside the ball), the rest
/// coordinate refinement with a halving step. BackMAN's own step is the
/// first candidate.
pub fn best_response_search(
    state: &NashState,
    l: usize,
    i: usize,
    budget: usize,
    seed: u64,
) -> Result<BestResponseReport> {
    best_response_search_with(state, l, i, budget, seed, RolloutMode::Full)
}

pub fn best_response_search_with(
    state: &NashState,
    l: usize,
    i: usize,
    budget: usize,
    seed: u64,
    mode: RolloutMode,
) -> Result<BestResponseReport> {
    if budget < 1000 {
        return input_err(format!("search budget {budget} below 1000 rollouts"));
    }
    let alpha = state.alpha;
    let own = state.backman_response(l, i).to_vec();
    let d = own.len();
    let own_utility = rollout_utility_with(state, l, i, &own, mode)?;
    let mut report = BestResponseReport {
        layer: l + 1,
        agent: i,
        alpha,
        cosine: 0.0,
        norm_ratio: 0.0,
        samples: 0,
        refinements: 0,
        rollouts: 1,
        utility: own_utility,
        backman_utility: own_utility,
        valid: !state.is_stalled(l, i),
    };
    if !report.valid {
        return Ok(report);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((l as u64) << 32 | i as u64));
    let mut best = own.clone();
    let mut best_u = own_utility;
    let sampled = budget * 3 / 5;
    for k in 0..sampled {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n == 0.0 {
            continue;
        }
        let radius = if k % 2 == 0 { alpha } else { alpha * rng.random::<f64>().powf(1.0 / d as f64) };
        v.iter_mut().for_each(|x| *x *= radius / n);
        let u = rollout_utility_with(state, l, i, &v, mode)?;
        report.samples += 1;
        if u > best_u {
            best_u = u;
            best = v;
        }
    }
    report.rollouts += report.samples;

    let mut step = alpha / 4.0;
    while report.rollouts + 2 * d <= budget && step > alpha * 1e-12 {
        let mut improved = false;
        for j in 0..d {
            for sign in [1.0, -1.0] {
                let mut cand = best.clone();
                cand[j] += sign * step;
                project(&mut cand, alpha);
                let u = rollout_utility_with(state, l, i, &cand, mode)?;
                report.rollouts += 1;
                if u > best_u {
                    best_u = u;
                    best = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
        report.refinements += 1;
    }

    let dot: f64 = best.iter().zip(&own).map(|(a, b)| a * b).sum();
    report.cosine = dot / (norm(&best) * norm(&own));
    report.norm_ratio = norm(&best) / norm(&own);
    report.utility = best_u;
    Ok(report)
}

/// A random full-batch problem for `spec`: inputs uniform in `(-1, 1)`,
/// class labels uniform over the flattened output.
pub fn toy_problem(spec: &NetSpec, m: usize, seed: u64) -> Result<(Params, Batch, Targets)> {
    let params = init_params(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let size = spec.input.size();
    let data: Vec<f64> = (0..m * size).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = match spec.input {
        Shape::Flat(n) => Batch::Flat(Mat::new(m, n, data)?),
        Shape::Seq { channels, length } => Batch::Seq(Ten3::new([m, channels, length], data)?),
    };
    let classes = spec.output_shape()?.size();
    let labels = (0..m).map(|_| rng.random_range(0..classes)).collect();
    Ok((params, x, Targets::Classes(labels)))
}

/// Dense toy network `widths` with leaky-ReLU hidden layers.
pub fn toy_mlp(widths: &[usize]) -> NetSpec {
    NetSpec::mlp(widths, Activation::LeakyRelu { slope: 0.1 })
}

/// Best-response search for every agent at every `alpha`.
pub fn nash_sweep(
    spec: &NetSpec,
    params: &Params,
    x: &Batch,
    targets: &Targets,
    alphas: &[f64],
    budget: usize,
    seed: u64,
    mode: RolloutMode,
) -> Result<Vec<BestResponseReport>> {
    if alphas.len() < 2 {
        return input_err("alpha grid needs at least two values");
    }
    if alphas.windows(2).any(|w| w[1] >= w[0]) {
        return input_err("alpha grid must be strictly descending");
    }
    let mut out = Vec::new();
    for &alpha in alphas {
        let state = NashState::new(spec.clone(), params.clone(), x.clone(), targets.clone(), alpha)?;
        state.check_hypotheses()?;
        for l in 0..state.depth() {
            for i in 0..state.agents(l) {
                out.push(best_response_search_with(&state, l, i, budget, seed, mode)?);
            }
        }
    }
    Ok(out)
}

/// One agent's normalization record for the damping diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampingRecord {
    pub epoch: usize,
    /// 1-based layer.
    pub layer: usize,
    pub neuron: usize,
    pub c: f64,
    pub g_norm: f64,
    pub r_norm: f64,
    /// `c * |r_i^T a|`, equal to the budget for non-stalled agents.
    pub budget: f64,
    pub stalled: bool,
}

pub fn damping_records(epoch: usize, signals: &BackSignals) -> Vec<DampingRecord> {
    signals
        .records()
        .into_iter()
        .map(|r| DampingRecord {
            epoch,
            layer: r.layer,
            neuron: r.agent,
            c: r.c,
            g_norm: r.g_norm,
            r_norm: r.r_norm,
            budget: r.c * r.denom,
            stalled: r.stalled,
        })
        .collect()
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs[..n].iter().zip(&ys[..n]) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Per-layer correlation of `log c` against `log |g_i|` over non-stalled records.
pub fn damping_correlation(records: &[DampingRecord]) -> Vec<(usize, Option<f64>)> {
    let layers = records.iter().map(|r| r.layer).max().unwrap_or(0);
    (1..=layers)
        .map(|layer| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = records
                .iter()
                .filter(|r| r.layer == layer && !r.stalled && r.c > 0.0 && r.g_norm > 0.0)
                .map(|r| (r.c.ln(), r.g_norm.ln()))
                .unzip();
            (layer, pearson(&xs, &ys))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backman::backman_iteration;
    use crate::network::Head;

    fn state(alpha: f64, seed: u64) -> NashState {
        let spec = toy_mlp(&[3, 4, 3, 2]);
        let (p, x, y) = toy_problem(&spec, 8, seed).unwrap();
        NashState::new(spec, p, x, y, alpha).unwrap()
    }

    #[test]
    fn rollout_matches_uninterrupted_run() {
        let st = state(1e-2, 0);
        let mut p = st.params.clone();
        let policy = AlphaPolicy::Fixed(st.alpha);
        backman_iteration(&st.spec, &mut p, &st.x, &st.targets, &policy).unwrap();
        let after_one = p.clone();
        backman_iteration(&st.spec, &mut p, &st.x, &st.targets, &policy).unwrap();
        for l in 0..st.depth() {
            for i in 0..st.agents(l) {
                let b = st.backman_response(l, i).to_vec();
                let u = rollout_utility(&st, l, i, &b).unwrap();
                let want = if l + 1 == st.depth() {
                    let c = forward(&st.spec, &after_one, &st.x).unwrap();
                    -head_signal(st.spec.head, c.output(), &st.targets).unwrap().0
                } else {
                    norm(&p.layers[l + 1].outgoing(i))
                };
                assert_eq!(u.to_bits(), want.to_bits(), "agent ({l}, {i})");
            }
        }
    }

    #[test]
    fn frozen_signal_agrees_at_backman_step() {
        let st = state(1e-2, 4);
        for l in 0..st.depth() - 1 {
            for i in 0..st.agents(l) {
                let b = st.backman_response(l, i).to_vec();
                let full = rollout_utility(&st, l, i, &b).unwrap();
                let frozen = rollout_utility_with(&st, l, i, &b, RolloutMode::FrozenSignal).unwrap();
                assert!((full - frozen).abs() <= 1e-12 * full, "agent ({l}, {i}): {full} vs {frozen}");
            }
        }
        let r = best_response_search_with(&st, 0, 1, 2000, 1, RolloutMode::FrozenSignal).unwrap();
        assert!(r.cosine > 0.999, "{r:?}");
    }

    #[test]
    fn rollout_rejects_oversized_steps() {
        let st = state(1e-3, 1);
        assert!(rollout_utility(&st, 0, 0, &[1e-3, 1e-3, 0.0]).is_err());
        assert!(rollout_utility(&st, 0, 0, &[0.0, 0.0]).is_err());
        assert!(rollout_utility(&st, 5, 0, &[0.0; 3]).is_err());
    }

    #[test]
    fn backman_beats_standing_still() {
        for seed in 0..3 {
            let st = state(1e-3, seed);
            for l in 0..st.depth() {
                for i in 0..st.agents(l) {
                    if st.is_stalled(l, i) {
                        continue;
                    }
                    let b = st.backman_response(l, i).to_vec();
                    let moved = rollout_utility(&st, l, i, &b).unwrap();
                    let still = rollout_utility(&st, l, i, &vec![0.0; b.len()]).unwrap();
                    assert!(moved >= still, "seed {seed} agent ({l}, {i}): {moved} < {still}");
                }
            }
        }
    }

    #[test]
    fn search_never_loses_to_backman() {
        let st = state(1e-2, 2);
        assert!(best_response_search(&st, 0, 0, 0, 0).is_err());
        for l in 0..st.depth() {
            let r = best_response_search(&st, l, 0, 1000, 3).unwrap();
            assert!(r.utility >= r.backman_utility - 1e-12);
            assert!(r.cosine.is_finite() && r.norm_ratio.is_finite());
            assert!(r.rollouts <= 1000);
        }
    }

    #[test]
    fn last_layer_direction() {
        let st = state(1e-3, 0);
        let l = st.depth() - 1;
        for i in 0..st.agents(l) {
            let r = best_response_search(&st, l, i, 2000, 1).unwrap();
            assert!(r.cosine >= 0.999, "{r:?}");
        }
    }

    #[test]
    fn sweep_is_deterministic() {
        let spec = toy_mlp(&[3, 4, 3, 2]);
        let (p, x, y) = toy_problem(&spec, 8, 5).unwrap();
        let a = nash_sweep(&spec, &p, &x, &y, &[1e-2, 1e-3], 1000, 7, RolloutMode::Full).unwrap();
        let b = nash_sweep(&spec, &p, &x, &y, &[1e-2, 1e-3], 1000, 7, RolloutMode::Full).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2 * 9);
        assert!(nash_sweep(&spec, &p, &x, &y, &[1e-3, 1e-2], 1000, 7, RolloutMode::Full).is_err());
        assert!(nash_sweep(&spec, &p, &x, &y, &[1e-3], 1000, 7, RolloutMode::Full).is_err());
    }

    #[test]
    fn relu_outputs_fail_the_hypothesis_check() {
        let spec = NetSpec::mlp(&[3, 4, 3, 2], Activation::Relu);
        let (p, x, y) = toy_problem(&spec, 8, 0).unwrap();
        let st = NashState::new(spec, p, x, y, 1e-3).unwrap();
        assert!(st.check_hypotheses().is_err());
    }

    #[test]
    fn cnn_state_runs() {
        let spec =
            NetSpec::cnn(2, 6, &[(3, 2), (2, 2)], Activation::LeakyRelu { slope: 0.1 }, Head::SoftmaxCrossEntropy);
        let (p, x, y) = toy_problem(&spec, 4, 0).unwrap();
        let st = NashState::new(spec, p, x, y, 1e-3).unwrap();
        st.check_hypotheses().unwrap();
        assert_eq!(st.backman_response(0, 0).len(), 4);
        let r = best_response_search(&st, 0, 1, 1000, 0).unwrap();
        assert!(r.utility >= r.backman_utility);
    }

    #[test]
    fn damping_stream() {
        let st = state(0.05, 3);
        let recs = damping_records(1, &st.signals);
        assert_eq!(recs.len(), 9);
        for r in &recs {
            if !r.stalled {
                assert!((r.budget - 0.05).abs() <= 1e-15);
            }
        }
        assert!(damping_correlation(&[]).is_empty());
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), Some(1.0));
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]), None);
        assert_eq!(pearson(&[1.0], &[2.0]), None);
    }
}

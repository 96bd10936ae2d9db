//! Numerical verification suites: gradients, the forced-c=1 equivalence,
//! budget proportionality, convolution adjoints and Nash best responses.

use std::path::Path;

use backman_core::backman::{backward_backman, AlphaPolicy};
use backman_core::ebp::{finite_difference_check, forced_c1_trajectory, TrajectoryReport};
use backman_core::nash::{nash_sweep, toy_mlp, toy_problem, BestResponseReport, RolloutMode};
use backman_core::network::{forward, head_signal, init_params, Activation, Batch, Head, NetSpec, Params, Targets};
use backman_core::tensor::{adjoint_trials, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::train::RunResult;

/// One measured quantity against its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub suite: &'static str,
    pub metric: String,
    pub value: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn pass(&self) -> bool {
        self.value <= self.tolerance
    }
}

fn uniform(m: usize, n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Mat {
    Mat::new(m, n, (0..m * n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Worst central-difference error on a small dense net and a small conv net.
pub fn finite_differences(seed: u64, probes: usize) -> RunResult<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetSpec::mlp(&[6, 8, 7, 4], Activation::Relu);
    let params = init_params(&spec, seed)?;
    let x = Batch::Flat(uniform(10, 6, -1.5, 1.5, &mut rng));
    let y = Targets::Classes((0..10).map(|_| rng.random_range(0..4)).collect());
    let dense = finite_difference_check(&spec, &params, &x, &y, probes, 1e-6, seed)?;

    let spec = NetSpec::cnn(2, 7, &[(3, 3), (4, 2), (2, 2)], Activation::Relu, Head::SoftmaxCrossEntropy);
    let params = init_params(&spec, seed + 1)?;
    let x = Batch::Seq(uniform(5, 14, -1.5, 1.5, &mut rng).into_ten3(2, 7)?);
    let y = Targets::Classes((0..5).map(|_| rng.random_range(0..6)).collect());
    let conv = finite_difference_check(&spec, &params, &x, &y, probes, 1e-6, seed + 1)?;
    Ok((dense, conv))
}

/// The reference network for the equivalence and proportionality checks.
pub fn reference_mlp() -> NetSpec {
    NetSpec::mlp(&[784, 64, 64, 10], Activation::Relu)
}

/// First `m` samples of `data` as a full batch.
pub fn full_batch(data: &Dataset, m: usize) -> (Batch, Targets) {
    let d = data.head(m, data.split);
    (d.batch(), d.targets())
}

/// BackMAN with every budget equal to its own signal norm against SGD at rate 1.
pub fn equivalence(x: &Batch, y: &Targets, seed: u64, steps: usize) -> RunResult<TrajectoryReport> {
    Ok(forced_c1_trajectory(&reference_mlp(), seed, x, y, steps)?)
}

/// Runs one backward pass at `alpha` and at `3 alpha` on the same cache.
/// Returns the worst relative deviation of `g(3a)` from `3 g(a)` and of the
/// hidden-layer `c` from each other.
pub fn proportionality(spec: &NetSpec, params: &Params, x: &Batch, y: &Targets, alpha: f64) -> RunResult<(f64, f64)> {
    let cache = forward(spec, params, x)?;
    let (_, r_out) = head_signal(spec.head, cache.output(), y)?;
    let one = backward_backman(params, &cache, &r_out, &AlphaPolicy::Fixed(alpha))?;
    let three = backward_backman(params, &cache, &r_out, &AlphaPolicy::Fixed(3.0 * alpha))?;
    let rel = |a: f64, b: f64| if a == b { 0.0 } else { (a - b).abs() / a.abs().max(b.abs()) };
    let mut g_dev = 0.0f64;
    let mut c_dev = 0.0f64;
    let depth = one.layers.len();
    for (l, (a, b)) in one.layers.iter().zip(&three.layers).enumerate() {
        for (ga, gb) in a.g.as_slice().iter().zip(b.g.as_slice()) {
            g_dev = g_dev.max(rel(3.0 * ga, *gb));
        }
        if l + 1 < depth {
            for (ca, cb) in a.c.iter().zip(&b.c) {
                c_dev = c_dev.max(rel(*ca, *cb));
            }
        }
    }
    Ok((g_dev, c_dev))
}

/// The fixed battery behind `backman check`. Uses `train` for the MNIST
/// checks when given, and random inputs of the same shape otherwise.
pub fn run_checks(train: Option<&Dataset>, seed: u64) -> RunResult<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let (dense, conv) = finite_differences(seed, 200)?;
    rows.push(CheckRow { suite: "gradient", metric: "dense_max_rel_error".into(), value: dense, tolerance: 1e-4 });
    rows.push(CheckRow { suite: "gradient", metric: "conv_max_rel_error".into(), value: conv, tolerance: 1e-4 });

    let (x, y) = match train {
        Some(d) => full_batch(d, 256),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = uniform(256, 784, -0.4242, 2.8215, &mut rng);
            (Batch::Flat(x), Targets::Classes((0..256).map(|_| rng.random_range(0..10)).collect()))
        }
    };
    let eq = equivalence(&x, &y, seed, 20)?;
    rows.push(CheckRow {
        suite: "equivalence",
        metric: "max_rel_weight_deviation".into(),
        value: eq.max_weight_deviation(),
        tolerance: 1e-9,
    });
    rows.push(CheckRow {
        suite: "equivalence",
        metric: "max_rel_signal_deviation".into(),
        value: eq.max_signal_deviation(),
        tolerance: 1e-10,
    });

    let params = init_params(&reference_mlp(), seed)?;
    let (g_dev, c_dev) = proportionality(&reference_mlp(), &params, &x, &y, 0.05)?;
    rows.push(CheckRow { suite: "proportionality", metric: "g_rel_deviation".into(), value: g_dev, tolerance: 1e-12 });
    rows.push(CheckRow {
        suite: "proportionality",
        metric: "hidden_c_rel_deviation".into(),
        value: c_dev,
        tolerance: 1e-12,
    });

    let adj = adjoint_trials(100, seed);
    rows.push(CheckRow {
        suite: "adjoint",
        metric: "transpose_max_rel_error".into(),
        value: adj.transpose,
        tolerance: 1e-10,
    });
    rows.push(CheckRow {
        suite: "adjoint",
        metric: "correlate_max_rel_error".into(),
        value: adj.correlate,
        tolerance: 1e-10,
    });
    Ok(rows)
}

pub fn write_checks(path: &Path, rows: &[CheckRow]) -> RunResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["suite", "metric", "value", "tolerance", "pass"])?;
    for r in rows {
        w.write_record([
            r.suite.to_string(),
            r.metric.clone(),
            r.value.to_string(),
            r.tolerance.to_string(),
            r.pass().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Toy network families for the best-response sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NashNet {
    /// `[3, 4, 3, 2]`, eight samples.
    Mlp,
    /// Conv channels `2 -> 3 -> 2`, kernel 2, length 6, four samples.
    Cnn,
}

impl NashNet {
    pub fn spec(self) -> NetSpec {
        match self {
            NashNet::Mlp => toy_mlp(&[3, 4, 3, 2]),
            NashNet::Cnn => {
                NetSpec::cnn(2, 6, &[(3, 2), (2, 2)], Activation::LeakyRelu { slope: 0.1 }, Head::SoftmaxCrossEntropy)
            }
        }
    }

    pub fn samples(self) -> usize {
        match self {
            NashNet::Mlp => 8,
            NashNet::Cnn => 4,
        }
    }
}

/// Sweep results for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct NashRun {
    pub seed: u64,
    pub reports: Vec<BestResponseReport>,
}

pub fn nash_runs(
    net: NashNet,
    seeds: &[u64],
    alphas: &[f64],
    budget: usize,
    mode: RolloutMode,
) -> RunResult<Vec<NashRun>> {
    let spec = net.spec();
    seeds
        .iter()
        .map(|&seed| {
            let (p, x, y) = toy_problem(&spec, net.samples(), seed)?;
            let reports = nash_sweep(&spec, &p, &x, &y, alphas, budget, seed, mode)?;
            Ok(NashRun { seed, reports })
        })
        .collect()
}

/// Aggregates of a sweep against the convergence targets.
#[derive(Debug, Clone, PartialEq)]
pub struct NashSummary {
    /// Lowest cosine of a valid hidden agent at the smallest alpha.
    pub hidden_min_cosine: f64,
    /// Largest `|norm_ratio - 1|` of a valid hidden agent at the smallest alpha.
    pub hidden_max_ratio_gap: f64,
    /// Lowest cosine of a valid last-layer agent at any alpha.
    pub last_min_cosine: f64,
    /// Share of valid hidden agents whose cosine at the smallest alpha is at
    /// least its cosine at the largest alpha.
    pub trend_share: f64,
    /// Share of valid hidden agents that improve from the largest to the
    /// smallest alpha or sit above 0.999 at both.
    pub trend_or_converged_share: f64,
    /// Agents skipped as stalled.
    pub invalid: usize,
}

pub fn summarize(runs: &[NashRun]) -> NashSummary {
    let mut s = NashSummary {
        hidden_min_cosine: f64::INFINITY,
        hidden_max_ratio_gap: 0.0,
        last_min_cosine: f64::INFINITY,
        trend_share: 1.0,
        trend_or_converged_share: 1.0,
        invalid: 0,
    };
    let (mut pairs, mut up, mut up_or_done) = (0usize, 0usize, 0usize);
    for run in runs {
        let depth = run.reports.iter().map(|r| r.layer).max().unwrap_or(0);
        let hi = run.reports.iter().map(|r| r.alpha).fold(f64::NEG_INFINITY, f64::max);
        let lo = run.reports.iter().map(|r| r.alpha).fold(f64::INFINITY, f64::min);
        for r in &run.reports {
            if !r.valid {
                s.invalid += 1;
                continue;
            }
            if r.layer == depth {
                s.last_min_cosine = s.last_min_cosine.min(r.cosine);
            } else if r.alpha == lo {
                s.hidden_min_cosine = s.hidden_min_cosine.min(r.cosine);
                s.hidden_max_ratio_gap = s.hidden_max_ratio_gap.max((r.norm_ratio - 1.0).abs());
                let start =
                    run.reports.iter().find(|q| q.alpha == hi && q.layer == r.layer && q.agent == r.agent && q.valid);
                if let Some(q) = start {
                    pairs += 1;
                    up += usize::from(r.cosine >= q.cosine);
                    up_or_done += usize::from(r.cosine > q.cosine || (r.cosine > 0.999 && q.cosine > 0.999));
                }
            }
        }
    }
    if pairs > 0 {
        s.trend_share = up as f64 / pairs as f64;
        s.trend_or_converged_share = up_or_done as f64 / pairs as f64;
    }
    s
}

pub fn write_nash(path: &Path, runs: &[NashRun]) -> RunResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "l", "i", "alpha", "cosine", "norm_ratio", "effort", "valid"])?;
    for run in runs {
        for r in &run.reports {
            w.write_record([
                run.seed.to_string(),
                r.layer.to_string(),
                r.agent.to_string(),
                r.alpha.to_string(),
                r.cosine.to_string(),
                r.norm_ratio.to_string(),
                r.rollouts.to_string(),
                r.valid.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        let (dense, conv) = finite_differences(3, 50).unwrap();
        assert!(dense <= 1e-4 && conv <= 1e-4, "{dense} {conv}");
        let spec = NetSpec::mlp(&[5, 6, 4], Activation::Relu);
        let params = init_params(&spec, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Batch::Flat(uniform(7, 5, -1.0, 1.0, &mut rng));
        let y = Targets::Classes(vec![0, 1, 2, 3, 0, 1, 2]);
        let (g, c) = proportionality(&spec, &params, &x, &y, 0.01).unwrap();
        assert!(g <= 1e-12 && c <= 1e-12, "{g} {c}");
    }

    fn report(layer: usize, agent: usize, alpha: f64, cosine: f64) -> BestResponseReport {
        BestResponseReport {
            layer,
            agent,
            alpha,
            cosine,
            norm_ratio: 1.0,
            samples: 0,
            refinements: 0,
            rollouts: 0,
            utility: 0.0,
            backman_utility: 0.0,
            valid: true,
        }
    }

    #[test]
    fn summary_arithmetic() {
        let run = NashRun {
            seed: 0,
            reports: vec![
                report(1, 0, 1e-2, 0.9),
                report(1, 1, 1e-2, 0.9995),
                report(2, 0, 1e-2, 0.99995),
                report(1, 0, 1e-4, 0.95),
                report(1, 1, 1e-4, 0.9992),
                report(2, 0, 1e-4, 0.9999),
            ],
        };
        let s = summarize(&[run]);
        assert_eq!(s.hidden_min_cosine, 0.95);
        assert_eq!(s.last_min_cosine, 0.9999);
        assert_eq!(s.trend_share, 0.5);
        assert_eq!(s.trend_or_converged_share, 1.0);
    }
}

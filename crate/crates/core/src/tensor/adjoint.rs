//! Randomized checks of the two adjoint identities linking the convolution
//! family under the Frobenius inner product.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{conv1d, conv1d_correlate, conv1d_transpose, frobenius_inner, Ten3};

/// Worst relative error seen by [`adjoint_trials`] for each identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointReport {
    pub trials: usize,
    /// `<A, psi(B, C)> = <ConvT(B, A), C>`
    pub transpose: f64,
    /// `<A, Conv(B, C)> = <psi(A, B), C>`
    pub correlate: f64,
}

fn random(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Ten3 {
    let n = dims.iter().product();
    Ten3::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

fn rel(x: f64, y: f64) -> f64 {
    (x - y).abs() / x.abs().max(y.abs()).max(1e-300)
}

/// Runs `trials` random-shape instances of each identity.
pub fn adjoint_trials(trials: usize, seed: u64) -> AdjointReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AdjointReport { trials, transpose: 0.0, correlate: 0.0 };
    for _ in 0..trials {
        let m = rng.random_range(1..=4);
        let n = rng.random_range(1..=4);
        let p = rng.random_range(1..=4);
        let k = rng.random_range(1..=5);
        let d = rng.random_range(1..=8);

        // A: n x 1 x k, B: m x n x d, C: m x 1 x (d+k-1)
        let a = random([n, 1, k], &mut rng);
        let b = random([m, n, d], &mut rng);
        let c = random([m, 1, d + k - 1], &mut rng);
        let lhs = frobenius_inner(&a, &conv1d_correlate(&b, &c, k).expect("shapes")).expect("shapes");
        let rhs = frobenius_inner(&conv1d_transpose(&b, &a).expect("shapes"), &c).expect("shapes");
        report.transpose = report.transpose.max(rel(lhs, rhs));

        // A: n x 1 x k, B: n x p x (2k-1), C: 1 x p x k
        let b = random([n, p, 2 * k - 1], &mut rng);
        let c = random([1, p, k], &mut rng);
        let lhs = frobenius_inner(&a, &conv1d(&b, &c).expect("shapes")).expect("shapes");
        let rhs = frobenius_inner(&conv1d_correlate(&a, &b, k).expect("shapes"), &c).expect("shapes");
        report.correlate = report.correlate.max(rel(lhs, rhs));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities_hold() {
        let r = adjoint_trials(100, 9);
        assert!(r.transpose <= 1e-10, "{r:?}");
        assert!(r.correlate <= 1e-10, "{r:?}");
        assert_eq!(adjoint_trials(5, 1), adjoint_trials(5, 1));
    }
}

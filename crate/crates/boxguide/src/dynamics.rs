//! Verification harness for the softmax ascent analysis: the softmax
//! Jacobian, the masked-coverage objective `f(v) = sum_u q_u m_u` with
//! `q = softmax(v)`, single ascent steps, and the ratio-amplification
//! property — one gradient-ascent step strictly amplifies the probability
//! ratio between any two in-mask coordinates.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

/// One randomized ascent trial: logits, a binary mask with at least two ones,
/// a step size, and a pair of in-mask indices with strictly ordered
/// probabilities.
#[derive(Debug, Clone)]
pub struct AscentTrial {
    pub logits: Array1<f64>,
    pub mask: Array1<f64>,
    pub beta: f64,
    pub j: usize,
    pub k: usize,
}

impl AscentTrial {
    pub fn validate(&self) -> Result<()> {
        let n = self.logits.len();
        if n < 2 || self.mask.len() != n {
            return Err(Error::InvalidConfig(
                "trial needs matching logits/mask of length >= 2".into(),
            ));
        }
        if self.mask.iter().filter(|&&m| m > 0.5).count() < 2 {
            return Err(Error::InvalidConfig("mask needs at least two ones".into()));
        }
        if self.beta <= 0.0 {
            return Err(Error::InvalidConfig("beta must be positive".into()));
        }
        if self.mask[self.j] < 0.5 || self.mask[self.k] < 0.5 {
            return Err(Error::InvalidConfig(
                "indices j, k must both lie inside the mask".into(),
            ));
        }
        let q = softmax(&self.logits);
        if q[self.j] <= q[self.k] {
            return Err(Error::InvalidConfig(
                "trial requires q_j > q_k strictly".into(),
            ));
        }
        Ok(())
    }
}

/// Numerically stable softmax of a flat logit vector.
pub fn softmax(v: &Array1<f64>) -> Array1<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = v.mapv(|x| (x - max).exp());
    let s = e.sum();
    e /= s;
    e
}

/// Softmax Jacobian `J = diag(q) - q q^T`. Symmetric with zero row sums.
pub fn softmax_jacobian(q: &Array1<f64>) -> Array2<f64> {
    let n = q.len();
    let mut j = Array2::zeros((n, n));
    for a in 0..n {
        for b in 0..n {
            j[[a, b]] = if a == b { q[a] * (1.0 - q[a]) } else { -q[a] * q[b] };
        }
    }
    j
}

/// Gradient of `f(v) = q^T m` w.r.t. the logits: component `u` equals
/// `q_u (m_u - q^T m)`.
pub fn masked_objective_gradient(v: &Array1<f64>, m: &Array1<f64>) -> Array1<f64> {
    let q = softmax(v);
    let qm: f64 = q.iter().zip(m.iter()).map(|(a, b)| a * b).sum();
    Array1::from_iter(q.iter().zip(m.iter()).map(|(qu, mu)| qu * (mu - qm)))
}

/// One exact gradient-ascent step `v' = v + beta * grad f(v)`.
pub fn ascent_step(trial: &AscentTrial) -> Array1<f64> {
    let g = masked_objective_gradient(&trial.logits, &trial.mask);
    &trial.logits + &g.mapv(|x| trial.beta * x)
}

/// Probability ratio `q_j / q_k` before and after one ascent step.
pub fn ratio_amplification_trial(trial: &AscentTrial) -> Result<(f64, f64)> {
    trial.validate()?;
    let q = softmax(&trial.logits);
    let before = q[trial.j] / q[trial.k];
    let v2 = ascent_step(trial);
    let q2 = softmax(&v2);
    let after = q2[trial.j] / q2[trial.k];
    Ok((before, after))
}

/// Batch verification report for the ratio-amplification property.
#[derive(Debug, Clone, Serialize)]
pub struct Theorem1Report {
    pub trials: usize,
    pub passed: usize,
    /// Fraction of trials with strict amplification and ordered q'.
    pub pass_fraction: f64,
    /// Largest violation of strict amplification (0 when all pass).
    pub max_violation: f64,
    /// Largest relative error of the multiplicative ratio identity
    /// `q'_j/q'_k = (q_j/q_k) * exp(beta' (q_j - q_k))`.
    pub max_identity_error: f64,
}

/// Runs randomized trials (`n` in `[3, 64]`, standard-normal logits, random
/// masks with at least two ones, `beta` in `(0, 1]`) and checks that a single
/// ascent step strictly amplifies `q_j / q_k` for every valid pair.
pub fn verify_theorem1(trials: usize, rng_seed: u64) -> Result<Theorem1Report> {
    if trials == 0 {
        return Err(Error::InvalidConfig("need at least one trial".into()));
    }
    let mut passed = 0usize;
    let mut max_violation = 0.0f64;
    let mut max_identity_error = 0.0f64;
    let mut done = 0usize;
    let mut attempt = 0u64;
    while done < trials {
        // Per-trial stream so results do not depend on rejected attempts.
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed.wrapping_add(attempt));
        attempt += 1;
        let n = rng.gen_range(3..=64);
        let logits = Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
        let mut mask = Array1::from_shape_fn(n, |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        // Guarantee at least two in-mask coordinates.
        let a = rng.gen_range(0..n);
        let mut b = rng.gen_range(0..n);
        while b == a {
            b = rng.gen_range(0..n);
        }
        mask[a] = 1.0;
        mask[b] = 1.0;
        // A full mask makes the objective constant (zero gradient); the
        // amplification statement needs a proper subset.
        if mask.iter().all(|&m| m > 0.5) {
            continue;
        }
        let beta = rng.gen_range(f64::EPSILON..=1.0);
        let q = softmax(&logits);
        // Pick the strict pair: order (a, b) by probability; filter ties.
        let (j, k) = if q[a] > q[b] { (a, b) } else { (b, a) };
        if (q[j] - q[k]).abs() < 1e-12 {
            continue;
        }
        let trial = AscentTrial {
            logits,
            mask,
            beta,
            j,
            k,
        };
        let (before, after) = ratio_amplification_trial(&trial)?;
        let q2 = softmax(&ascent_step(&trial));
        let strict = after > before && q2[j] > q2[k];
        if strict {
            passed += 1;
        } else {
            max_violation = max_violation.max(before - after);
        }
        // Multiplicative identity: beta' = beta (m_j - q^T m) is the shared
        // in-mask step scalar.
        let qm: f64 = q.iter().zip(trial.mask.iter()).map(|(x, y)| x * y).sum();
        let beta_prime = trial.beta * (1.0 - qm);
        let predicted = before * (beta_prime * (q[j] - q[k])).exp();
        let rel = ((after - predicted) / predicted).abs();
        max_identity_error = max_identity_error.max(rel);
        done += 1;
    }
    Ok(Theorem1Report {
        trials,
        passed,
        pass_fraction: passed as f64 / trials as f64,
        max_violation,
        max_identity_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn jacobian_of_symmetric_two_point() {
        let j = softmax_jacobian(&array![0.5, 0.5]);
        assert!((j[[0, 0]] - 0.25).abs() < 1e-15);
        assert!((j[[0, 1]] + 0.25).abs() < 1e-15);
        assert!((j[[1, 0]] + 0.25).abs() < 1e-15);
        assert!((j[[1, 1]] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn jacobian_vertex_is_zero() {
        let j = softmax_jacobian(&array![1.0, 0.0]);
        assert!(j.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn jacobian_rows_sum_to_zero() {
        let q = softmax(&array![0.3, -1.0, 2.0, 0.1]);
        let j = softmax_jacobian(&q);
        for row in j.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_vanishes_on_trivial_masks() {
        let v = array![0.5, -0.2, 1.0];
        let ones = array![1.0, 1.0, 1.0];
        let zeros = array![0.0, 0.0, 0.0];
        assert!(masked_objective_gradient(&v, &ones)
            .iter()
            .all(|g| g.abs() < 1e-12));
        assert!(masked_objective_gradient(&v, &zeros)
            .iter()
            .all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn gradient_two_point_hand_value() {
        let g = masked_objective_gradient(&array![0.0, 0.0], &array![1.0, 0.0]);
        assert!((g[0] - 0.25).abs() < 1e-12);
        assert!((g[1] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn gradient_components_sum_to_zero() {
        let v = array![1.0, 0.3, -0.7, 0.0, 2.2];
        let m = array![1.0, 0.0, 1.0, 0.0, 1.0];
        assert!(masked_objective_gradient(&v, &m).sum().abs() < 1e-12);
    }

    #[test]
    fn ascent_step_per_coordinate_identity() {
        let trial = AscentTrial {
            logits: array![1.0, 0.0, 0.0],
            mask: array![1.0, 1.0, 0.0],
            beta: 1.0,
            j: 0,
            k: 1,
        };
        let q = softmax(&trial.logits);
        let qm: f64 = q.iter().zip(trial.mask.iter()).map(|(a, b)| a * b).sum();
        let v2 = ascent_step(&trial);
        for u in 0..3 {
            let expect = trial.logits[u] + trial.beta * q[u] * (trial.mask[u] - qm);
            assert!((v2[u] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ratio_strictly_increases() {
        let trial = AscentTrial {
            logits: array![1.0, 0.0, -1.0],
            mask: array![1.0, 1.0, 0.0],
            beta: 0.5,
            j: 0,
            k: 1,
        };
        let (before, after) = ratio_amplification_trial(&trial).unwrap();
        assert!(after > before);
    }

    #[test]
    fn equal_probability_pair_is_rejected() {
        let trial = AscentTrial {
            logits: array![0.0, 0.0, 1.0],
            mask: array![1.0, 1.0, 0.0],
            beta: 0.5,
            j: 0,
            k: 1,
        };
        assert!(ratio_amplification_trial(&trial).is_err());
    }

    #[test]
    fn tiny_beta_leaves_ratio_nearly_unchanged() {
        let trial = AscentTrial {
            logits: array![1.0, 0.0, -1.0],
            mask: array![1.0, 1.0, 0.0],
            beta: 1e-12,
            j: 0,
            k: 1,
        };
        let (before, after) = ratio_amplification_trial(&trial).unwrap();
        assert!((after - before).abs() < 1e-9);
    }

    #[test]
    fn batch_verification_passes() {
        let report = verify_theorem1(500, 12345).unwrap();
        assert_eq!(report.pass_fraction, 1.0);
        assert!(report.max_identity_error < 1e-12);
    }
}

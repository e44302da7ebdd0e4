//! The adaptive Langevin sampler update: conditional score assembly, the
//! signal-to-noise step size, the adaptive two-task weight, the inner chain,
//! a gradient-descent baseline, and an optional Metropolis-Hastings
//! correction.

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::energy::EnergyModel;
use crate::error::{Error, Result};

/// Abstract diffusion prior: exact or approximate score of the noised
/// marginal, the noising schedule, and the clean-data log-density used for
/// evaluation.
pub trait ScoreModel: Sync {
    /// `∇_z log p(z_t)` at noise level `t`.
    fn score(&self, z: &Array3<f64>, t: usize) -> Array3<f64>;

    /// Log-density `log p(z_t)` at noise level `t` (used by the optional
    /// Metropolis correction; may be unnormalized up to a `t`-dependent
    /// constant).
    fn log_density(&self, z: &Array3<f64>, t: usize) -> f64;

    /// Noising schedule value `alpha_bar(t)`, decreasing in `t`.
    fn alpha_bar(&self, t: usize) -> f64;

    /// Number of denoising steps `T`.
    fn total_steps(&self) -> usize;

    /// Log-density of a clean sample under the `t = 0` prior.
    fn loglik0(&self, z: &Array3<f64>) -> f64;
}

/// How the energy-gradient weight is chosen at each inner iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NuMode {
    /// Balance the two gradient norms each iteration.
    Adaptive,
    /// A constant weight.
    Fixed(f64),
}

/// Inner-loop sampler configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LangevinConfig {
    /// Signal-to-noise ratio of the step-size rule.
    pub snr: f64,
    /// Inner iterations per guided denoising step.
    pub inner_steps: usize,
    pub nu_mode: NuMode,
    /// When false the stochastic term is dropped (pure drift).
    pub noise_enabled: bool,
    /// Metropolis-Hastings accept/reject on each inner step.
    pub mh_correction: bool,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            snr: 0.06,
            inner_steps: 4,
            nu_mode: NuMode::Adaptive,
            noise_enabled: true,
            mh_correction: false,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr <= 0.0 {
            return Err(Error::InvalidConfig("snr must be positive".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::InvalidConfig("inner_steps must be >= 1".into()));
        }
        if let NuMode::Fixed(nu) = self.nu_mode {
            if nu < 0.0 {
                return Err(Error::InvalidConfig("fixed nu must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Latent grid plus its position in the outer/inner loops.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub z: Array3<f64>,
    /// Outer denoising timestep.
    pub t: usize,
    /// Inner iteration counter, `0 <= k <= O`.
    pub k: usize,
}

impl ChainState {
    pub fn new(z: Array3<f64>, t: usize) -> Self {
        ChainState { z, t, k: 0 }
    }
}

/// Per-inner-step diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub score_norm: f64,
    pub energy_grad_norm: f64,
    pub nu: f64,
    pub xi: f64,
    pub energy_total: f64,
}

fn l2_norm(a: &Array3<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Two-task balance weight: the ratio of the score norm to the energy
/// gradient norm, so the weighted energy gradient matches the score in
/// magnitude.
pub fn adaptive_nu(score_grad: &Array3<f64>, energy_grad: &Array3<f64>) -> Result<f64> {
    let ge = l2_norm(energy_grad);
    if ge <= 0.0 {
        return Err(Error::LayoutSatisfied);
    }
    Ok(l2_norm(score_grad) / ge)
}

/// Exact positive solution of the two-task bargaining system
/// `GᵀG α = 1/α`: with `n_i = ‖g_i‖` and `c = cosθ` between the gradients,
/// `α_i = 1 / (n_i √(1 + c))`. The coefficient ratio `α1/α2 = n2/n1`.
pub fn nash_alpha_2task(g1: &[f64], g2: &[f64]) -> Result<(f64, f64)> {
    if g1.len() != g2.len() || g1.is_empty() {
        return Err(Error::InvalidConfig(
            "gradients must be nonempty and of equal dimension".into(),
        ));
    }
    let n1 = g1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = g2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 <= 0.0 || n2 <= 0.0 {
        return Err(Error::InvalidConfig("gradients must be nonzero".into()));
    }
    let dot: f64 = g1.iter().zip(g2.iter()).map(|(a, b)| a * b).sum();
    let cos = dot / (n1 * n2);
    // Solvability requires the gradients not to be antiparallel.
    if 1.0 + cos <= 0.0 {
        return Err(Error::NoNashSolution(cos));
    }
    let root = (1.0 + cos).sqrt();
    Ok((1.0 / (n1 * root), 1.0 / (n2 * root)))
}

/// `∇ log p(z_t) - ν ∇E(z_t)`, elementwise.
pub fn conditional_score(
    score: &Array3<f64>,
    energy_grad: &Array3<f64>,
    nu: f64,
) -> Array3<f64> {
    score - &energy_grad.mapv(|v| nu * v)
}

/// Signal-to-noise step size `ξ = 2 (r ‖ε‖ / ‖s‖)²` where `s` is the
/// conditional score.
pub fn step_size(score_cond: &Array3<f64>, r: f64, noise: &Array3<f64>) -> Result<f64> {
    if r <= 0.0 {
        return Err(Error::InvalidConfig("snr must be positive".into()));
    }
    let sn = l2_norm(score_cond);
    if sn <= 0.0 {
        return Err(Error::StationaryPoint);
    }
    Ok(2.0 * (r * l2_norm(noise) / sn).powi(2))
}

/// Drift ingredients at a state: energy gradient (if any), ν, and the
/// conditional score. A vanished energy gradient is treated as "layout
/// satisfied": the energy term is skipped rather than aborting the chain.
fn assemble_conditional_score(
    z: &Array3<f64>,
    t: usize,
    model: &dyn ScoreModel,
    energy: Option<(&EnergyModel, f64)>,
    config: &LangevinConfig,
) -> Result<(Array3<f64>, f64, f64, f64, f64)> {
    let score = model.score(z, t);
    let score_norm = l2_norm(&score);
    let (s_cond, nu, ge_norm, e_total) = match energy {
        Some((em, rho)) => {
            let g = em.gradient(z, rho)?;
            let gn = l2_norm(&g);
            let e = em.energy(z, rho)?;
            if gn <= 0.0 {
                (score, 0.0, 0.0, e)
            } else {
                let nu = match config.nu_mode {
                    NuMode::Adaptive => score_norm / gn,
                    NuMode::Fixed(v) => v,
                };
                (conditional_score(&score, &g, nu), nu, gn, e)
            }
        }
        None => (score, 0.0, 0.0, 0.0),
    };
    Ok((s_cond, nu, ge_norm, score_norm, e_total))
}

/// One Langevin inner step: `z ← z + ξ s_cond + √(2ξ) ε` with the same noise
/// draw entering both the step-size rule and the stochastic term.
pub fn langevin_step<R: Rng>(
    state: &ChainState,
    model: &dyn ScoreModel,
    energy: Option<(&EnergyModel, f64)>,
    config: &LangevinConfig,
    rng: &mut R,
) -> Result<(ChainState, StepLog)> {
    config.validate()?;
    let eps = Array3::from_shape_fn(state.z.dim(), |_| rng.sample::<f64, _>(StandardNormal));
    let (s_cond, nu, ge_norm, score_norm, e_total) =
        assemble_conditional_score(&state.z, state.t, model, energy, config)?;
    let xi = step_size(&s_cond, config.snr, &eps)?;
    let mut z = &state.z + &s_cond.mapv(|v| xi * v);
    if config.noise_enabled {
        let amp = (2.0 * xi).sqrt();
        z = &z + &eps.mapv(|v| amp * v);
    }
    Ok((
        ChainState {
            z,
            t: state.t,
            k: state.k + 1,
        },
        StepLog {
            score_norm,
            energy_grad_norm: ge_norm,
            nu,
            xi,
            energy_total: e_total,
        },
    ))
}

/// Metropolis-Hastings accept/reject for a Langevin proposal against the
/// unnormalized target `log p(z_t) - ν E(z)`, with the position-dependent
/// Gaussian kernel implied by the drift rule. The kernel uses the expected
/// noise norm `√d` in the step size so both directions have well-defined
/// densities.
pub fn mh_correction<R: Rng>(
    proposed: &ChainState,
    current: &ChainState,
    model: &dyn ScoreModel,
    energy: Option<(&EnergyModel, f64)>,
    config: &LangevinConfig,
    rng: &mut R,
) -> Result<(ChainState, bool)> {
    if proposed.t != current.t {
        return Err(Error::InvalidConfig(
            "proposal and current state must share a timestep".into(),
        ));
    }
    let d = current.z.len() as f64;
    let log_target = |z: &Array3<f64>| -> Result<f64> {
        let mut lp = model.log_density(z, current.t);
        if let Some((em, rho)) = energy {
            let nu = match config.nu_mode {
                NuMode::Fixed(v) => v,
                NuMode::Adaptive => {
                    let score = model.score(z, current.t);
                    let g = em.gradient(z, rho)?;
                    let gn = l2_norm(&g);
                    if gn <= 0.0 {
                        0.0
                    } else {
                        l2_norm(&score) / gn
                    }
                }
            };
            lp -= nu * em.energy(z, rho)?;
        }
        Ok(lp)
    };
    // Gaussian kernel density q(y | x) with mean x + ξ(x) s(x), variance 2ξ(x).
    let log_kernel = |from: &Array3<f64>, to: &Array3<f64>| -> Result<f64> {
        let (s_cond, ..) =
            assemble_conditional_score(from, current.t, model, energy, config)?;
        let sn = l2_norm(&s_cond);
        if sn <= 0.0 {
            return Err(Error::StationaryPoint);
        }
        let xi = 2.0 * (config.snr * d.sqrt() / sn).powi(2);
        let mut sq = 0.0;
        for ((t_, f), s) in to.iter().zip(from.iter()).zip(s_cond.iter()) {
            let diff = t_ - (f + xi * s);
            sq += diff * diff;
        }
        Ok(-sq / (4.0 * xi) - 0.5 * d * (4.0 * std::f64::consts::PI * xi).ln())
    };
    let lp_prop = log_target(&proposed.z)?;
    let lp_cur = log_target(&current.z)?;
    if lp_prop == f64::NEG_INFINITY {
        return Ok((current.clone(), false));
    }
    let log_accept = if proposed.z == current.z {
        0.0
    } else {
        lp_prop - lp_cur + log_kernel(&proposed.z, &current.z)?
            - log_kernel(&current.z, &proposed.z)?
    };
    let accept = log_accept >= 0.0 || rng.gen::<f64>().ln() < log_accept;
    if accept {
        Ok((proposed.clone(), true))
    } else {
        Ok((current.clone(), false))
    }
}

/// Runs the inner chain for `config.inner_steps` iterations. With the
/// Metropolis correction enabled, each proposal is drawn with the
/// expected-noise step size so the accept ratio is exact for the
/// position-dependent kernel.
pub fn run_inner_chain<R: Rng>(
    state: ChainState,
    model: &dyn ScoreModel,
    energy: Option<(&EnergyModel, f64)>,
    config: &LangevinConfig,
    rng: &mut R,
    logs: Option<&mut Vec<StepLog>>,
) -> Result<ChainState> {
    config.validate()?;
    let mut s = state;
    s.k = 0;
    let mut sink = logs;
    for _ in 0..config.inner_steps {
        if config.mh_correction {
            let d = s.z.len() as f64;
            let (s_cond, nu, ge_norm, score_norm, e_total) =
                assemble_conditional_score(&s.z, s.t, model, energy, config)?;
            let sn = l2_norm(&s_cond);
            if sn <= 0.0 {
                return Err(Error::StationaryPoint);
            }
            let xi = 2.0 * (config.snr * d.sqrt() / sn).powi(2);
            let amp = (2.0 * xi).sqrt();
            let eps =
                Array3::from_shape_fn(s.z.dim(), |_| rng.sample::<f64, _>(StandardNormal));
            let z_prop = &s.z + &s_cond.mapv(|v| xi * v) + &eps.mapv(|v| amp * v);
            let proposed = ChainState {
                z: z_prop,
                t: s.t,
                k: s.k + 1,
            };
            let (next, _accepted) = mh_correction(&proposed, &s, model, energy, config, rng)?;
            if let Some(v) = sink.as_deref_mut() {
                v.push(StepLog {
                    score_norm,
                    energy_grad_norm: ge_norm,
                    nu,
                    xi,
                    energy_total: e_total,
                });
            }
            s = ChainState {
                z: next.z,
                t: s.t,
                k: s.k + 1,
            };
        } else {
            let (next, log) = langevin_step(&s, model, energy, config, rng)?;
            if let Some(v) = sink.as_deref_mut() {
                v.push(log);
            }
            s = next;
        }
    }
    Ok(s)
}

/// Plain gradient descent on the layout energy: `z ← z - η ∇E` for `iters`
/// iterations. The baseline the stochastic update is compared against.
pub fn backprop_update(
    state: &ChainState,
    energy: &EnergyModel,
    eta: f64,
    iters: usize,
    rho: f64,
) -> Result<ChainState> {
    if eta < 0.0 {
        return Err(Error::InvalidConfig("eta must be nonnegative".into()));
    }
    let mut z = state.z.clone();
    for _ in 0..iters {
        let g = energy.gradient(&z, rho)?;
        z = &z - &g.mapv(|v| eta * v);
    }
    Ok(ChainState {
        z,
        t: state.t,
        k: state.k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Standard normal prior at every noise level; score is exactly `-z`.
    #[derive(Debug)]
    struct StdNormal;

    impl ScoreModel for StdNormal {
        fn score(&self, z: &Array3<f64>, _t: usize) -> Array3<f64> {
            z.mapv(|v| -v)
        }
        fn log_density(&self, z: &Array3<f64>, _t: usize) -> f64 {
            -0.5 * z.iter().map(|v| v * v).sum::<f64>()
        }
        fn alpha_bar(&self, _t: usize) -> f64 {
            1.0
        }
        fn total_steps(&self) -> usize {
            50
        }
        fn loglik0(&self, z: &Array3<f64>) -> f64 {
            self.log_density(z, 0)
        }
    }

    #[test]
    fn adaptive_nu_is_norm_ratio() {
        let s = Array3::from_elem((1, 1, 4), 1.0); // norm 2
        let g = Array3::from_elem((1, 1, 4), 2.0); // norm 4
        assert!((adaptive_nu(&s, &g).unwrap() - 0.5).abs() < 1e-15);
        let e = Array3::from_elem((1, 1, 4), 1.0);
        assert!((adaptive_nu(&e, &e.clone()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adaptive_nu_scale_cancellation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = Array3::from_shape_fn((2, 2, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let g = Array3::from_shape_fn((2, 2, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let nu1 = adaptive_nu(&s, &g).unwrap();
        let g5 = g.mapv(|v| 5.0 * v);
        let nu5 = adaptive_nu(&s, &g5).unwrap();
        let a = conditional_score(&s, &g, nu1);
        let b = conditional_score(&s, &g5, nu5);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nash_orthogonal_unit_vectors() {
        let (a1, a2) = nash_alpha_2task(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((a1 - 1.0).abs() < 1e-12);
        assert!((a2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nash_parallel_pair_ratio_and_residual() {
        let g1 = [1.0, 0.0, 0.0];
        let g2 = [2.0, 0.0, 0.0];
        let (a1, a2) = nash_alpha_2task(&g1, &g2).unwrap();
        assert!((a1 / a2 - 2.0).abs() < 1e-12);
        // Residual of the 2x2 system.
        let n1 = 1.0;
        let n2 = 2.0;
        let dot = 2.0;
        let r1: f64 = n1 * n1 * a1 + dot * a2 - 1.0 / a1;
        let r2: f64 = dot * a1 + n2 * n2 * a2 - 1.0 / a2;
        assert!(r1.abs() < 1e-12 && r2.abs() < 1e-12);
    }

    #[test]
    fn nash_rejects_antiparallel() {
        assert!(matches!(
            nash_alpha_2task(&[1.0, 0.0], &[-2.0, 0.0]),
            Err(Error::NoNashSolution(_))
        ));
    }

    #[test]
    fn conditional_score_reduces_to_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Array3::from_shape_fn((2, 2, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let g = Array3::from_shape_fn((2, 2, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let c = conditional_score(&s, &g, 0.0);
        assert_eq!(c, s);
        let z = Array3::zeros((2, 2, 1));
        let c2 = conditional_score(&s, &z, 7.0);
        assert_eq!(c2, s);
    }

    #[test]
    fn step_size_value_and_homogeneity() {
        let s = Array3::from_elem((1, 1, 1), 1.0);
        let n = Array3::from_elem((1, 1, 1), 1.0);
        let xi = step_size(&s, 0.06, &n).unwrap();
        assert!((xi - 0.0072).abs() < 1e-15);
        let s2 = s.mapv(|v| 2.0 * v);
        assert!((step_size(&s2, 0.06, &n).unwrap() - xi / 4.0).abs() < 1e-15);
    }

    #[test]
    fn drift_only_step_contracts_gaussian() {
        let cfg = LangevinConfig {
            noise_enabled: false,
            ..LangevinConfig::default()
        };
        let z = Array3::from_elem((1, 1, 2), 3.0);
        let state = ChainState::new(z.clone(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (next, log) = langevin_step(&state, &StdNormal, None, &cfg, &mut rng).unwrap();
        for (a, b) in next.z.iter().zip(z.iter()) {
            assert!((a - (1.0 - log.xi) * b).abs() < 1e-12);
        }
    }

    #[test]
    fn chain_is_deterministic_for_a_seed() {
        let cfg = LangevinConfig::default();
        let z = Array3::from_elem((2, 2, 2), 0.5);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            run_inner_chain(
                ChainState::new(z.clone(), 5),
                &StdNormal,
                None,
                &cfg,
                &mut rng,
                None,
            )
            .unwrap()
            .z
        };
        assert_eq!(run(99), run(99));
        assert_ne!(run(99), run(100));
    }

    #[test]
    fn mh_accepts_identical_proposal() {
        let cfg = LangevinConfig {
            nu_mode: NuMode::Fixed(0.0),
            ..LangevinConfig::default()
        };
        let z = Array3::from_elem((1, 1, 2), 0.7);
        let s = ChainState::new(z, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, accepted) = mh_correction(&s.clone(), &s, &StdNormal, None, &cfg, &mut rng).unwrap();
        assert!(accepted);
    }

    #[test]
    fn mh_rejects_zero_density_proposal() {
        struct Bounded;
        impl ScoreModel for Bounded {
            fn score(&self, z: &Array3<f64>, _t: usize) -> Array3<f64> {
                z.mapv(|v| -v)
            }
            fn log_density(&self, z: &Array3<f64>, _t: usize) -> f64 {
                if z.iter().any(|v| v.abs() > 1.0) {
                    f64::NEG_INFINITY
                } else {
                    0.0
                }
            }
            fn alpha_bar(&self, _t: usize) -> f64 {
                1.0
            }
            fn total_steps(&self) -> usize {
                1
            }
            fn loglik0(&self, _z: &Array3<f64>) -> f64 {
                0.0
            }
        }
        let cfg = LangevinConfig::default();
        let cur = ChainState::new(Array3::from_elem((1, 1, 2), 0.1), 0);
        let prop = ChainState::new(Array3::from_elem((1, 1, 2), 5.0), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (kept, accepted) =
            mh_correction(&prop, &cur, &Bounded, None, &cfg, &mut rng).unwrap();
        assert!(!accepted);
        assert_eq!(kept.z, cur.z);
    }

    #[test]
    fn backprop_with_zero_eta_is_identity() {
        use crate::grid::{BoundingBox, LayoutSpec};
        use crate::head::ToyAttentionHead;
        let layout =
            LayoutSpec::new(vec![(0, BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap())]).unwrap();
        let head = ToyAttentionHead::new(1, 2, 0.5, 3).unwrap();
        let em = EnergyModel::new(layout, head, 4, 4, 4.0).unwrap();
        let z = Array3::from_elem((4, 4, 2), 0.3);
        let s = ChainState::new(z.clone(), 1);
        let out = backprop_update(&s, &em, 0.0, 5, 1.0).unwrap();
        assert_eq!(out.z, z);
    }
}

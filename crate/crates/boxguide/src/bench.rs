//! Analytically tractable diffusion testbed: a Gaussian-mixture latent prior
//! with exact noised-marginal scores, a deterministic denoising sampler, the
//! guided sampling loop with selectable refinement baselines, a brute-force
//! posterior oracle for low-dimensional validation, and layout metrics.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::energy::{rho_at, EnergyBreakdown, EnergyModel, GuidanceWeights};
use crate::error::{Error, Result};
use crate::langevin::{
    backprop_update, run_inner_chain, ChainState, LangevinConfig, ScoreModel, StepLog,
};

/// A mixture of isotropic Gaussians over latent grids, with a
/// variance-preserving noising schedule. All scores and densities are exact.
#[derive(Debug, Clone)]
pub struct GaussianMixtureLatentModel {
    weights: Vec<f64>,
    means: Vec<Array3<f64>>,
    variances: Vec<f64>,
    steps: usize,
    alpha_bar_start: f64,
    alpha_bar_end: f64,
}

impl GaussianMixtureLatentModel {
    pub fn new(
        components: Vec<(f64, Array3<f64>, f64)>,
        steps: usize,
        alpha_bar_start: f64,
        alpha_bar_end: f64,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidConfig("mixture needs >= 1 component".into()));
        }
        let total: f64 = components.iter().map(|c| c.0).sum();
        if components.iter().any(|c| c.0 <= 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(
                "mixture weights must be positive and sum to 1".into(),
            ));
        }
        if components.iter().any(|c| c.2 <= 0.0) {
            return Err(Error::InvalidConfig("variances must be positive".into()));
        }
        let dim = components[0].1.dim();
        if components.iter().any(|c| c.1.dim() != dim) {
            return Err(Error::InvalidConfig(
                "all component means must share a shape".into(),
            ));
        }
        if steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if !(0.0 < alpha_bar_end
            && alpha_bar_end < alpha_bar_start
            && alpha_bar_start < 1.0 + 1e-12)
        {
            return Err(Error::InvalidConfig(
                "require 0 < alpha_bar_end < alpha_bar_start <= 1".into(),
            ));
        }
        let (weights, means, variances) = components.into_iter().fold(
            (Vec::new(), Vec::new(), Vec::new()),
            |(mut w, mut m, mut v), (cw, cm, cv)| {
                w.push(cw);
                m.push(cm);
                v.push(cv);
                (w, m, v)
            },
        );
        Ok(GaussianMixtureLatentModel {
            weights,
            means,
            variances,
            steps,
            alpha_bar_start,
            alpha_bar_end,
        })
    }

    /// A single standard-normal component on the given grid shape; its noised
    /// marginal is standard normal at every level and the score is `-z`.
    pub fn standard_normal(shape: (usize, usize, usize), steps: usize) -> Self {
        GaussianMixtureLatentModel {
            weights: vec![1.0],
            means: vec![Array3::zeros(shape)],
            variances: vec![1.0],
            steps,
            alpha_bar_start: 0.9999,
            alpha_bar_end: 0.01,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.means[0].dim()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Component log-densities at noise level `t`, used by both the score and
    /// the total log-density.
    fn component_logs(&self, z: &Array3<f64>, t: usize) -> Vec<f64> {
        let ab = self.alpha_bar(t);
        let d = z.len() as f64;
        let root_ab = ab.sqrt();
        self.weights
            .iter()
            .zip(self.means.iter())
            .zip(self.variances.iter())
            .map(|((w, mu), var)| {
                let v = ab * var + 1.0 - ab;
                let sq: f64 = z
                    .iter()
                    .zip(mu.iter())
                    .map(|(zi, mi)| {
                        let diff = zi - root_ab * mi;
                        diff * diff
                    })
                    .sum();
                w.ln() - 0.5 * sq / v - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln()
            })
            .collect()
    }
}

impl ScoreModel for GaussianMixtureLatentModel {
    fn score(&self, z: &Array3<f64>, t: usize) -> Array3<f64> {
        let ab = self.alpha_bar(t);
        let root_ab = ab.sqrt();
        let logs = self.component_logs(z, t);
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = resp.iter().sum();
        let mut g = Array3::zeros(z.dim());
        for ((r, mu), var) in resp.iter().zip(self.means.iter()).zip(self.variances.iter()) {
            let v = ab * var + 1.0 - ab;
            let coef = r / total / v;
            for ((gi, zi), mi) in g.iter_mut().zip(z.iter()).zip(mu.iter()) {
                *gi -= coef * (zi - root_ab * mi);
            }
        }
        g
    }

    fn log_density(&self, z: &Array3<f64>, t: usize) -> f64 {
        let logs = self.component_logs(z, t);
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }

    fn alpha_bar(&self, t: usize) -> f64 {
        let frac = t as f64 / self.steps as f64;
        self.alpha_bar_start + (self.alpha_bar_end - self.alpha_bar_start) * frac
    }

    fn total_steps(&self) -> usize {
        self.steps
    }

    fn loglik0(&self, z: &Array3<f64>) -> f64 {
        let d = z.len() as f64;
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter())
            .zip(self.variances.iter())
            .map(|((w, mu), var)| {
                let sq: f64 = z
                    .iter()
                    .zip(mu.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                w.ln() - 0.5 * sq / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }
}

/// One deterministic denoising transition from `z_{t}` to `z̄_{t-1}`: the
/// exact score is converted to a noise prediction
/// `ε̂ = -√(1-ᾱ(t)) · score`, which then drives the standard implicit update.
pub fn denoise_step(state: &ChainState, model: &dyn ScoreModel) -> Result<ChainState> {
    if state.t == 0 {
        return Err(Error::InvalidConfig("cannot denoise below t = 0".into()));
    }
    let t = state.t;
    let ab_t = model.alpha_bar(t);
    let ab_p = model.alpha_bar(t - 1);
    let score = model.score(&state.z, t);
    let sqrt_one_minus = (1.0 - ab_t).sqrt();
    // With ab_p == ab_t the update is the identity.
    let mut z = Array3::zeros(state.z.dim());
    let root_t = ab_t.sqrt();
    let root_p = ab_p.sqrt();
    let tail_p = (1.0 - ab_p).sqrt();
    for ((zi, si), out) in state.z.iter().zip(score.iter()).zip(z.iter_mut()) {
        let eps_hat = -sqrt_one_minus * si;
        let x0 = (zi - sqrt_one_minus * eps_hat) / root_t;
        *out = root_p * x0 + tail_p * eps_hat;
    }
    Ok(ChainState {
        z,
        t: t - 1,
        k: 0,
    })
}

/// Which refinement runs inside the guided window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    /// Pure denoising, no layout guidance.
    None,
    /// Gradient descent on the layout energy.
    Backprop,
    /// The stochastic inner chain.
    Langevin,
}

/// Step strength and iteration count for the gradient-descent baseline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BackpropConfig {
    pub eta: f64,
    pub iters: usize,
}

impl Default for BackpropConfig {
    fn default() -> Self {
        BackpropConfig {
            eta: 0.1,
            iters: 5,
        }
    }
}

/// How much per-run history to retain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceMode {
    None,
    /// Per-guided-step energy breakdowns and per-inner-step norms.
    Norms,
    /// Norms plus the final latent values.
    Full,
}

/// Recorded history of one guided run.
#[derive(Debug, Clone, Serialize)]
pub struct SampleTrace {
    pub energies: Vec<EnergyBreakdown>,
    pub inner_logs: Vec<Vec<StepLog>>,
    /// Flattened final latent (row-major, channel-minor); only in full mode.
    pub final_latent: Option<Vec<f64>>,
}

/// Layout metrics of a finished sample.
#[derive(Debug, Clone, Serialize)]
pub struct BenchMetrics {
    /// In-box share of each token's attention mass (globally normalized).
    pub coverage_per_token: Vec<f64>,
    /// Normalized in-box entropy of each token's attention.
    pub spread_per_token: Vec<f64>,
    /// Whether each token's attention argmax lies inside its box.
    pub argmax_in_box: Vec<bool>,
    /// Means over tokens.
    pub coverage: f64,
    pub spread: f64,
    /// Log-density of the final sample under the clean-data mixture.
    pub loglik: f64,
}

/// Result of one guided run.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub latent: Array3<f64>,
    pub trace: SampleTrace,
    pub metrics: BenchMetrics,
}

/// Coverage, spread, argmax placement, and clean-data log-likelihood of a
/// final latent.
pub fn compute_metrics(
    latent: &Array3<f64>,
    energy: &EnergyModel,
    model: &dyn ScoreModel,
) -> Result<BenchMetrics> {
    let attentions = energy.attentions(latent)?;
    let mut coverage_per_token = Vec::with_capacity(attentions.len());
    let mut spread_per_token = Vec::with_capacity(attentions.len());
    let mut argmax_in_box = Vec::with_capacity(attentions.len());
    for (att, mask) in attentions.iter().zip(energy.masks().iter()) {
        let tilde = att.normalize_global()?;
        coverage_per_token.push((tilde.values() * mask.values()).sum());
        let ahat = att.normalize_masked(mask)?;
        let mut entropy = 0.0;
        for (r, c) in mask
            .values()
            .indexed_iter()
            .filter(|(_, v)| **v > 0.5)
            .map(|(idx, _)| idx)
        {
            let p = ahat.values()[[r, c]];
            if p > 0.0 {
                entropy -= p * p.ln();
            }
        }
        let n = mask.count();
        spread_per_token.push(if n > 1 {
            entropy / (n as f64).ln()
        } else {
            1.0
        });
        let argmax = att
            .values()
            .indexed_iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(idx, _)| idx)
            .unwrap();
        argmax_in_box.push(mask.contains(argmax.0, argmax.1));
    }
    let n = coverage_per_token.len() as f64;
    Ok(BenchMetrics {
        coverage: coverage_per_token.iter().sum::<f64>() / n,
        spread: spread_per_token.iter().sum::<f64>() / n,
        loglik: model.loglik0(latent),
        coverage_per_token,
        spread_per_token,
        argmax_in_box,
    })
}

/// Runs the full guided sampler: `T` denoising steps from seeded standard
/// normal noise, with the selected refinement applied during the first `G`
/// steps at weight `rho_at(step)`. The initial noise depends only on the
/// seed, never on the baseline, so baselines are compared on identical
/// trajectory starts.
#[allow(clippy::too_many_arguments)]
pub fn guided_sample(
    model: &dyn ScoreModel,
    energy: &EnergyModel,
    guidance: &GuidanceWeights,
    langevin: &LangevinConfig,
    backprop: &BackpropConfig,
    baseline: Baseline,
    seed: u64,
    trace_mode: TraceMode,
) -> Result<SampleRun> {
    guidance.validate()?;
    langevin.validate()?;
    let shape = {
        let m = energy.masks();
        let (h, w) = (m[0].height(), m[0].width());
        (h, w, energy.head().channels())
    };
    let t_total = model.total_steps();
    if guidance.total_steps != t_total {
        return Err(Error::InvalidConfig(format!(
            "guidance total_steps {} does not match the model's {} steps",
            guidance.total_steps, t_total
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0 = Array3::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal));
    let mut state = ChainState::new(z0, t_total);
    let mut energies = Vec::new();
    let mut inner_logs = Vec::new();
    for step in 0..t_total {
        state = denoise_step(&state, model)?;
        if step < guidance.guidance_steps && baseline != Baseline::None {
            let rho = rho_at(step, guidance)?;
            state = match baseline {
                Baseline::Backprop => {
                    backprop_update(&state, energy, backprop.eta, backprop.iters, rho)?
                }
                Baseline::Langevin => {
                    let mut logs = Vec::new();
                    let sink = if trace_mode == TraceMode::None {
                        None
                    } else {
                        Some(&mut logs)
                    };
                    let s =
                        run_inner_chain(state, model, Some((energy, rho)), langevin, &mut rng, sink)?;
                    if trace_mode != TraceMode::None {
                        inner_logs.push(logs);
                    }
                    s
                }
                Baseline::None => unreachable!(),
            };
            if trace_mode != TraceMode::None {
                energies.push(energy.breakdown(&state.z, rho)?);
            }
        }
    }
    let metrics = compute_metrics(&state.z, energy, model)?;
    let final_latent = if trace_mode == TraceMode::Full {
        Some(state.z.iter().cloned().collect())
    } else {
        None
    };
    Ok(SampleRun {
        metrics,
        trace: SampleTrace {
            energies,
            inner_logs,
            final_latent,
        },
        latent: state.z,
    })
}

/// A discretized two-dimensional density on a square grid of points.
#[derive(Debug, Clone)]
pub struct DiscretizedDensity {
    /// `resolution x resolution` nonnegative values integrating to 1 under
    /// the trapezoid rule.
    pub density: Array2<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl DiscretizedDensity {
    pub fn cell_width(&self) -> f64 {
        (self.hi - self.lo) / (self.density.nrows() as f64 - 1.0)
    }
}

/// Brute-force target density `p(z_t) · exp(-ν E(z))`, evaluated on a grid
/// over `[lo, hi]²` and normalized by the trapezoid rule. Only latents with
/// exactly two coordinates are supported.
pub fn posterior_oracle(
    model: &dyn ScoreModel,
    energy: &EnergyModel,
    nu: f64,
    rho: f64,
    t: usize,
    bounds: (f64, f64),
    resolution: usize,
) -> Result<DiscretizedDensity> {
    let m = energy.masks();
    let (h, w) = (m[0].height(), m[0].width());
    let c = energy.head().channels();
    let dim = h * w * c;
    if dim > 2 {
        return Err(Error::OracleDimension(dim));
    }
    if resolution < 100 {
        return Err(Error::InvalidConfig(
            "oracle resolution must be >= 100 per axis".into(),
        ));
    }
    let (lo, hi) = bounds;
    if !(hi > lo) {
        return Err(Error::InvalidConfig("invalid oracle bounds".into()));
    }
    let step = (hi - lo) / (resolution as f64 - 1.0);
    let mut logd = Array2::zeros((resolution, resolution));
    let mut z = Array3::zeros((h, w, c));
    for i in 0..resolution {
        for j in 0..resolution {
            let x = lo + i as f64 * step;
            let y = lo + j as f64 * step;
            // Coordinate order: first grid cell, then second, row-major.
            let mut it = z.iter_mut();
            *it.next().unwrap() = x;
            if let Some(second) = it.next() {
                *second = y;
            }
            let mut l = model.log_density(&z, t);
            if nu != 0.0 {
                l -= nu * energy.energy(&z, rho)?;
            }
            logd[[i, j]] = l;
        }
    }
    let max = logd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut density = logd.mapv(|l| (l - max).exp());
    // Trapezoid weights: boundary rows/columns count half.
    let mut integral = 0.0;
    for i in 0..resolution {
        for j in 0..resolution {
            let wi = if i == 0 || i == resolution - 1 { 0.5 } else { 1.0 };
            let wj = if j == 0 || j == resolution - 1 { 0.5 } else { 1.0 };
            integral += wi * wj * density[[i, j]];
        }
    }
    integral *= step * step;
    density /= integral;
    Ok(DiscretizedDensity { density, lo, hi })
}

//! Standalone verification suites behind the `verify` CLI verbs: the ascent
//! theorem harness lives in the core crate; this module adds the bargaining
//! closed-form check, the finite-difference gradient sweep, the sampler
//! moment check, and the low-dimensional posterior-oracle comparison.

use boxguide::bench::{posterior_oracle, GaussianMixtureLatentModel};
use boxguide::energy::{fd_gradient_oracle, relative_l2_error, EnergyModel};
use boxguide::grid::{BoundingBox, LayoutSpec};
use boxguide::head::ToyAttentionHead;
use boxguide::langevin::{
    langevin_step, nash_alpha_2task, ChainState, LangevinConfig, NuMode,
};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Worst-case errors of the two-task closed form over random gradient pairs.
#[derive(Debug, Clone, Serialize)]
pub struct NashSummary {
    pub pairs: usize,
    /// Max |GᵀGα − 1/α| component over all pairs.
    pub max_residual: f64,
    /// Max relative error of the ratio α1/α2 against ‖g2‖/‖g1‖.
    pub max_ratio_error: f64,
}

/// Checks the closed-form bargaining weights on `pairs` random gradient
/// pairs with dimensions in `[2, 512]`.
pub fn nash_suite(pairs: usize, seed: u64) -> boxguide::Result<NashSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_residual = 0.0f64;
    let mut max_ratio_error = 0.0f64;
    let mut done = 0;
    while done < pairs {
        let dim = rng.gen_range(2..=512);
        let g1: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let g2: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n1 = g1.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n2 = g2.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = g1.iter().zip(g2.iter()).map(|(a, b)| a * b).sum();
        // Antiparallel pairs have no solution; they have measure zero but a
        // near-degenerate draw would only test floating-point noise.
        if 1.0 + dot / (n1 * n2) < 1e-9 {
            continue;
        }
        let (a1, a2) = nash_alpha_2task(&g1, &g2)?;
        let r1 = n1 * n1 * a1 + dot * a2 - 1.0 / a1;
        let r2 = dot * a1 + n2 * n2 * a2 - 1.0 / a2;
        max_residual = max_residual.max(r1.abs()).max(r2.abs());
        let ratio_err = (a1 / a2 - n2 / n1).abs() / (n2 / n1);
        max_ratio_error = max_ratio_error.max(ratio_err);
        done += 1;
    }
    Ok(NashSummary {
        pairs,
        max_residual,
        max_ratio_error,
    })
}

/// Worst relative L2 disagreement between the analytic energy gradient and
/// central finite differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSummary {
    pub instances: usize,
    pub max_rel_error: f64,
}

/// A random box that rasterizes exactly onto `wc x hc` cells of an 8x8 grid.
fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let wc = rng.gen_range(2..=5u32);
    let hc = rng.gen_range(2..=5u32);
    let c0 = rng.gen_range(0..=(8 - wc));
    let r0 = rng.gen_range(0..=(8 - hc));
    BoundingBox::new(
        c0 as f64 / 8.0,
        r0 as f64 / 8.0,
        wc as f64 / 8.0,
        hc as f64 / 8.0,
    )
    .expect("lattice-aligned box")
}

/// Compares analytic and finite-difference layout-energy gradients on
/// `instances` random (latent, layout, λ, ρ) configurations on 8x8x4 grids.
pub fn gradcheck_suite(instances: usize, seed: u64) -> boxguide::Result<GradcheckSummary> {
    let mut max_rel_error = 0.0f64;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let n_tokens = rng.gen_range(1..=2usize);
        let layout = LayoutSpec::new(
            (0..n_tokens).map(|id| (id, random_box(&mut rng))).collect(),
        )?;
        let lambda = rng.gen_range(0.0..=8.0);
        let rho = rng.gen_range(0.0..=5.0);
        let head = ToyAttentionHead::new(n_tokens, 4, 0.3, rng.gen())?;
        let em = EnergyModel::new(layout, head, 8, 8, lambda)?;
        let z = Array3::from_shape_fn((8, 8, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let analytic = em.gradient(&z, rho)?;
        let numeric = fd_gradient_oracle(&z, |zz| em.energy(zz, rho).expect("energy"));
        max_rel_error = max_rel_error.max(relative_l2_error(&analytic, &numeric));
    }
    Ok(GradcheckSummary {
        instances,
        max_rel_error,
    })
}

/// Pooled first and second moments of a long unguided chain.
#[derive(Debug, Clone, Serialize)]
pub struct MomentsSummary {
    pub steps: usize,
    pub burn_in: usize,
    pub coordinates: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Runs the stochastic update against the exact standard-normal score with
/// the energy term disabled and reports moments pooled over a 128-coordinate
/// latent and all post-burn-in steps.
pub fn langevin_moments(
    burn_in: usize,
    steps: usize,
    snr: f64,
    seed: u64,
) -> boxguide::Result<MomentsSummary> {
    let shape = (8, 16, 1);
    let model = GaussianMixtureLatentModel::standard_normal(shape, 50);
    let config = LangevinConfig {
        snr,
        ..LangevinConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0 = Array3::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal));
    let mut state = ChainState::new(z0, 25);
    let mut count = 0usize;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for step in 0..(burn_in + steps) {
        let (next, _) = langevin_step(&state, &model, None, &config, &mut rng)?;
        state = next;
        if step >= burn_in {
            for v in state.z.iter() {
                sum += v;
                sum_sq += v * v;
                count += 1;
            }
        }
    }
    let mean = sum / count as f64;
    let variance = sum_sq / count as f64 - mean * mean;
    Ok(MomentsSummary {
        steps,
        burn_in,
        coordinates: shape.0 * shape.1 * shape.2,
        mean,
        variance,
    })
}

/// Total-variation distance between binned sampler output and quadrature.
#[derive(Debug, Clone, Serialize)]
pub struct OracleSummary {
    pub samples: usize,
    pub bins: usize,
    pub out_of_range: usize,
    pub tv_distance: f64,
}

/// Compares the stochastic sampler against the brute-force posterior on the
/// smallest nontrivial instance: a 1x2 one-channel grid, standard-normal
/// prior, fixed ν = 1, no Metropolis correction.
pub fn langevin_oracle_tv(
    samples: usize,
    burn_in: usize,
    bins: usize,
    seed: u64,
) -> boxguide::Result<OracleSummary> {
    let shape = (1, 2, 1);
    let t = 25;
    let nu = 1.0;
    let rho = 0.0;
    let (lo, hi) = (-4.0f64, 4.0f64);
    let model = GaussianMixtureLatentModel::standard_normal(shape, 50);
    let layout = LayoutSpec::new(vec![(0, BoundingBox::new(0.0, 0.0, 0.5, 1.0)?)])?;
    let head = ToyAttentionHead::new(1, 1, 0.5, 3)?;
    let em = EnergyModel::new(layout, head, 1, 2, 4.0)?;
    let config = LangevinConfig {
        nu_mode: NuMode::Fixed(nu),
        ..LangevinConfig::default()
    };

    // Empirical histogram over [lo, hi)².
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0 = Array3::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal));
    let mut state = ChainState::new(z0, t);
    let mut counts = vec![0u64; bins * bins];
    let mut out_of_range = 0usize;
    let width = (hi - lo) / bins as f64;
    for step in 0..(burn_in + samples) {
        let (next, _) = langevin_step(&state, &model, Some((&em, rho)), &config, &mut rng)?;
        state = next;
        if step < burn_in {
            continue;
        }
        let x = state.z[[0, 0, 0]];
        let y = state.z[[0, 1, 0]];
        if x < lo || x >= hi || y < lo || y >= hi {
            out_of_range += 1;
            continue;
        }
        let i = ((x - lo) / width) as usize;
        let j = ((y - lo) / width) as usize;
        counts[i * bins + j] += 1;
    }

    // Quadrature masses on the same bins: a fine grid with `sub` cells per
    // bin, midpoint rule inside each bin.
    let sub = 10usize;
    let resolution = bins * sub;
    let fine = (hi - lo) / resolution as f64;
    let oracle = posterior_oracle(
        &model,
        &em,
        nu,
        rho,
        t,
        (lo + fine / 2.0, hi - fine / 2.0),
        resolution,
    )?;
    let mut mass = vec![0.0f64; bins * bins];
    let cell = oracle.cell_width();
    for i in 0..resolution {
        for j in 0..resolution {
            mass[(i / sub) * bins + j / sub] += oracle.density[[i, j]] * cell * cell;
        }
    }
    let total_mass: f64 = mass.iter().sum();
    let n = samples as f64;
    let mut tv = 0.0;
    for (c, m) in counts.iter().zip(mass.iter()) {
        tv += (*c as f64 / n - m / total_mass).abs();
    }
    tv = 0.5 * (tv + out_of_range as f64 / n);
    Ok(OracleSummary {
        samples,
        bins,
        out_of_range,
        tv_distance: tv,
    })
}

//! Layout energies: the attention energy function, the KL regularizer toward
//! the center-weighted prior, their weighted combination with a linear
//! schedule, and hand-derived gradients with a finite-difference oracle.

use ndarray::{Array3, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{
    nonlocal_prior, rasterize_mask, BinaryMask, LayoutSpec, Normalization, TokenAttention,
};
use crate::head::ToyAttentionHead;

/// Schedule and geometry weights for guided sampling.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GuidanceWeights {
    /// Regularizer weight at the first guided step.
    pub rho_max: f64,
    /// Regularizer weight at the last guided step.
    pub rho_min: f64,
    /// Concentration of the center-weighted prior.
    pub lambda: f64,
    /// Number of guided denoising steps `G`.
    pub guidance_steps: usize,
    /// Total denoising steps `T >= G`.
    pub total_steps: usize,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        GuidanceWeights {
            rho_max: 5.0,
            rho_min: 0.0,
            lambda: 4.0,
            guidance_steps: 10,
            total_steps: 50,
        }
    }
}

impl GuidanceWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_max >= self.rho_min && self.rho_min >= 0.0) {
            return Err(Error::InvalidConfig(
                "require rho_max >= rho_min >= 0".into(),
            ));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be nonnegative".into()));
        }
        if self.guidance_steps == 0 || self.guidance_steps > self.total_steps {
            return Err(Error::InvalidConfig(
                "require 1 <= guidance_steps <= total_steps".into(),
            ));
        }
        Ok(())
    }
}

/// Per-token and aggregate energy values at a fixed regularizer weight.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyBreakdown {
    /// Sum of per-token attention energies.
    pub aef: f64,
    /// Sum of per-token KL divergences to the prior.
    pub nap: f64,
    /// `aef + rho * nap`.
    pub total: f64,
    /// Regularizer weight used.
    pub rho: f64,
    /// `(aef, nap)` per token, in layout order.
    pub per_token: Vec<(f64, f64)>,
}

/// `(1 - sum_u a~_u m_u)^2` where `a~` is the global normalization of the
/// attention map. Zero when all mass lies inside the mask, one when none does.
pub fn aef_energy(attention: &TokenAttention, mask: &BinaryMask) -> Result<f64> {
    let normalized = match attention.normalization() {
        Normalization::Raw => attention.normalize_global()?,
        Normalization::Global => attention.clone(),
        Normalization::Masked => {
            return Err(Error::DegenerateAttention(
                "aef_energy expects raw or globally normalized attention".into(),
            ))
        }
    };
    let s = (normalized.values() * mask.values()).sum();
    Ok((1.0 - s).powi(2))
}

/// KL divergence `sum_{u in S} a^_u log(a^_u / tau_u)` between the
/// mask-restricted attention and the prior. Nonnegative; zero iff they agree.
pub fn nap_divergence(
    attention: &TokenAttention,
    prior: &TokenAttention,
    mask: &BinaryMask,
) -> Result<f64> {
    if prior.normalization() != Normalization::Masked {
        return Err(Error::DegenerateAttention(
            "prior must be mask-normalized".into(),
        ));
    }
    let ahat = attention.normalize_masked(mask)?;
    let mut kl = 0.0;
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.contains(r, c) {
                let a = ahat.values()[[r, c]];
                if a > 0.0 {
                    kl += a * (a / prior.values()[[r, c]]).ln();
                }
            }
        }
    }
    Ok(kl)
}

/// Linearly decaying regularizer weight over the guided window:
/// `rho(step) = rho_max - (rho_max - rho_min) * step / (G - 1)`.
pub fn rho_at(step: usize, weights: &GuidanceWeights) -> Result<f64> {
    weights.validate()?;
    let g = weights.guidance_steps;
    if step >= g {
        return Err(Error::InvalidConfig(format!(
            "step {step} outside the guided window of {g} steps"
        )));
    }
    if g == 1 {
        return Ok(weights.rho_max);
    }
    Ok(weights.rho_max - (weights.rho_max - weights.rho_min) * step as f64 / (g - 1) as f64)
}

/// Total layout energy: `sum_i [ aef(a_i, m_i) + rho * kl(a_i, tau_i, m_i) ]`.
pub fn naef_total(
    attentions: &[TokenAttention],
    layout: &LayoutSpec,
    priors: &[TokenAttention],
    rho: f64,
) -> Result<EnergyBreakdown> {
    if attentions.len() != layout.len() || priors.len() != layout.len() {
        return Err(Error::InvalidConfig(
            "one attention map and one prior per layout token required".into(),
        ));
    }
    let height = attentions[0].values().nrows();
    let width = attentions[0].values().ncols();
    let mut aef_sum = 0.0;
    let mut nap_sum = 0.0;
    let mut per_token = Vec::with_capacity(layout.len());
    for (i, entry) in layout.tokens.iter().enumerate() {
        let mask = rasterize_mask(&entry.box_, height, width)?;
        let e = aef_energy(&attentions[i], &mask)?;
        let kl = if rho != 0.0 {
            nap_divergence(&attentions[i], &priors[i], &mask)?
        } else {
            // Still report the divergence for diagnostics when cheap to do so;
            // at rho = 0 it does not enter the total.
            nap_divergence(&attentions[i], &priors[i], &mask).unwrap_or(0.0)
        };
        aef_sum += e;
        nap_sum += kl;
        per_token.push((e, kl));
    }
    Ok(EnergyBreakdown {
        aef: aef_sum,
        nap: nap_sum,
        total: aef_sum + rho * nap_sum,
        rho,
        per_token,
    })
}

/// Precomputed layout geometry plus the attention head: everything needed to
/// evaluate the total energy and its analytic latent gradient repeatedly.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    layout: LayoutSpec,
    head: ToyAttentionHead,
    masks: Vec<BinaryMask>,
    priors: Vec<TokenAttention>,
}

impl EnergyModel {
    pub fn new(
        layout: LayoutSpec,
        head: ToyAttentionHead,
        height: usize,
        width: usize,
        lambda: f64,
    ) -> Result<Self> {
        layout.validate()?;
        if layout.len() > head.n_tokens() {
            return Err(Error::InvalidConfig(format!(
                "layout has {} tokens but the head only projects {}",
                layout.len(),
                head.n_tokens()
            )));
        }
        let mut masks = Vec::with_capacity(layout.len());
        let mut priors = Vec::with_capacity(layout.len());
        for entry in &layout.tokens {
            masks.push(rasterize_mask(&entry.box_, height, width)?);
            priors.push(nonlocal_prior(&entry.box_, height, width, lambda)?);
        }
        Ok(EnergyModel {
            layout,
            head,
            masks,
            priors,
        })
    }

    pub fn layout(&self) -> &LayoutSpec {
        &self.layout
    }

    pub fn head(&self) -> &ToyAttentionHead {
        &self.head
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn priors(&self) -> &[TokenAttention] {
        &self.priors
    }

    /// Energy breakdown at latent `z` with regularizer weight `rho`.
    pub fn breakdown(&self, z: &Array3<f64>, rho: f64) -> Result<EnergyBreakdown> {
        let attentions = self.attentions(z)?;
        naef_total(&attentions, &self.layout, &self.priors, rho)
    }

    /// Scalar total energy; convenience over [`EnergyModel::breakdown`].
    pub fn energy(&self, z: &Array3<f64>, rho: f64) -> Result<f64> {
        Ok(self.breakdown(z, rho)?.total)
    }

    /// Raw attention maps for each layout token.
    pub fn attentions(&self, z: &Array3<f64>) -> Result<Vec<TokenAttention>> {
        let p = self.head.probabilities(z);
        self.layout
            .tokens
            .iter()
            .enumerate()
            .map(|(i, _)| TokenAttention::raw(p.index_axis(Axis(0), i).to_owned()))
            .collect()
    }

    /// Analytic gradient of the total energy w.r.t. the latent, chained
    /// through the energy terms, the per-cell softmax Jacobian, and the
    /// linear projections.
    pub fn gradient(&self, z: &Array3<f64>, rho: f64) -> Result<Array3<f64>> {
        let p = self.head.probabilities(z);
        let (ntb, h, w) = p.dim();
        let mut dp = Array3::zeros((ntb, h, w));
        for (i, _entry) in self.layout.tokens.iter().enumerate() {
            let mask = &self.masks[i];
            let a = p.index_axis(Axis(0), i);
            let tot: f64 = a.sum();
            if tot <= 0.0 {
                return Err(Error::DegenerateAttention(format!(
                    "token {i} carries no attention mass"
                )));
            }
            let in_mass: f64 = (&a * mask.values()).sum();
            let s = in_mass / tot;
            // d/da_u of (1 - s)^2 with s = <a, m> / sum(a):
            // ds/da_u = (m_u - s) / tot.
            let coef = -2.0 * (1.0 - s) / tot;
            for r in 0..h {
                for c in 0..w {
                    let m = mask.values()[[r, c]];
                    dp[[i, r, c]] += coef * (m - s);
                }
            }
            if rho != 0.0 {
                if in_mass <= 0.0 {
                    return Err(Error::DegenerateAttention(format!(
                        "token {i} carries no attention mass inside its box"
                    )));
                }
                // KL(a^ || tau) with a^_u = a_u / A, A = sum_S a.
                // d KL / d a_v = (log(a^_v / tau_v) - KL) / A for v in S.
                let tau = self.priors[i].values();
                let mut kl = 0.0;
                for r in 0..h {
                    for c in 0..w {
                        if mask.contains(r, c) {
                            let ahat = a[[r, c]] / in_mass;
                            if ahat > 0.0 {
                                kl += ahat * (ahat / tau[[r, c]]).ln();
                            }
                        }
                    }
                }
                for r in 0..h {
                    for c in 0..w {
                        if mask.contains(r, c) {
                            let ahat = (a[[r, c]] / in_mass).max(f64::MIN_POSITIVE);
                            let lr = (ahat / tau[[r, c]]).ln();
                            dp[[i, r, c]] += rho * (lr - kl) / in_mass;
                        }
                    }
                }
            }
        }
        Ok(self.head.backward(&p, &dp))
    }
}

/// Convenience wrapper: builds the geometry for `latent`'s grid and returns
/// the analytic gradient of the total energy.
pub fn energy_gradient(
    latent: &Array3<f64>,
    layout: &LayoutSpec,
    head: &ToyAttentionHead,
    lambda: f64,
    rho: f64,
) -> Result<Array3<f64>> {
    let (h, w, _) = latent.dim();
    let model = EnergyModel::new(layout.clone(), head.clone(), h, w, lambda)?;
    model.gradient(latent, rho)
}

/// Central finite differences per coordinate with step
/// `h = 1e-5 * max(1, |z_coord|)`. Serves as the gradient oracle.
pub fn fd_gradient_oracle<F>(latent: &Array3<f64>, objective: F) -> Array3<f64>
where
    F: Fn(&Array3<f64>) -> f64,
{
    let mut grad = Array3::zeros(latent.dim());
    let mut z = latent.clone();
    let (h, w, c) = latent.dim();
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let v = latent[[r, col, ch]];
                let step = 1e-5 * v.abs().max(1.0);
                z[[r, col, ch]] = v + step;
                let fp = objective(&z);
                z[[r, col, ch]] = v - step;
                let fm = objective(&z);
                z[[r, col, ch]] = v;
                grad[[r, col, ch]] = (fp - fm) / (2.0 * step);
            }
        }
    }
    grad
}

/// Relative L2 error between two gradient fields.
pub fn relative_l2_error(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let diff2: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let ref2: f64 = b.iter().map(|y| y * y).sum();
    (diff2 / ref2.max(f64::MIN_POSITIVE)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoundingBox;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn mask_quarter() -> BinaryMask {
        rasterize_mask(&BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap(), 4, 4).unwrap()
    }

    #[test]
    fn aef_zero_when_all_mass_inside() {
        let mut v = Array2::zeros((4, 4));
        v[[0, 0]] = 0.7;
        v[[1, 1]] = 0.3;
        let a = TokenAttention::raw(v).unwrap();
        assert!(aef_energy(&a, &mask_quarter()).unwrap() < 1e-12);
    }

    #[test]
    fn aef_uniform_quarter_mask() {
        let a = TokenAttention::raw(Array2::from_elem((4, 4), 1.0)).unwrap();
        let e = aef_energy(&a, &mask_quarter()).unwrap();
        assert_eq!(e, 0.5625);
    }

    #[test]
    fn aef_one_when_all_mass_outside() {
        let mut v = Array2::zeros((4, 4));
        v[[3, 3]] = 2.0;
        let a = TokenAttention::raw(v).unwrap();
        assert!((aef_energy(&a, &mask_quarter()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_on_identical_distributions() {
        let b = BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let tau = nonlocal_prior(&b, 4, 4, 4.0).unwrap();
        let mask = mask_quarter();
        let kl = nap_divergence(&tau.clone(), &tau, &mask).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_point_mass_against_uniform_is_log_n() {
        let b = BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let tau = nonlocal_prior(&b, 4, 4, 0.0).unwrap();
        let mask = mask_quarter();
        let mut v = Array2::zeros((4, 4));
        v[[0, 0]] = 1.0;
        let a = TokenAttention::raw(v).unwrap();
        let kl = nap_divergence(&a, &tau, &mask).unwrap();
        assert!((kl - (mask.count() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_two_cell_hand_value() {
        // a^ = (0.9, 0.1) against tau = (0.5, 0.5).
        let expect = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let tau = nonlocal_prior(&b, 1, 2, 0.0).unwrap();
        let mask = rasterize_mask(&b, 1, 2).unwrap();
        let a =
            TokenAttention::raw(Array2::from_shape_vec((1, 2), vec![0.9, 0.1]).unwrap()).unwrap();
        let kl = nap_divergence(&a, &tau, &mask).unwrap();
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.3681).abs() < 5e-5);
    }

    #[test]
    fn rho_schedule_endpoints_and_midpoint() {
        let w = GuidanceWeights::default();
        assert_eq!(rho_at(0, &w).unwrap(), 5.0);
        assert_eq!(rho_at(9, &w).unwrap(), 0.0);
        assert!((rho_at(4, &w).unwrap() - (5.0 - 5.0 * 4.0 / 9.0)).abs() < 1e-12);
        assert!(rho_at(10, &w).is_err());
    }

    #[test]
    fn rho_constant_when_single_guided_step() {
        let w = GuidanceWeights {
            guidance_steps: 1,
            ..GuidanceWeights::default()
        };
        assert_eq!(rho_at(0, &w).unwrap(), 5.0);
    }

    #[test]
    fn naef_additivity_and_rho_linearity() {
        let layout = LayoutSpec::new(vec![
            (0, BoundingBox::new(0.05, 0.05, 0.4, 0.4).unwrap()),
            (1, BoundingBox::new(0.55, 0.55, 0.4, 0.4).unwrap()),
        ])
        .unwrap();
        let head = ToyAttentionHead::new(2, 4, 0.2, 7).unwrap();
        let model = EnergyModel::new(layout, head, 8, 8, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Array3::from_shape_fn((8, 8, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let b0 = model.breakdown(&z, 0.0).unwrap();
        let b1 = model.breakdown(&z, 1.0).unwrap();
        let b3 = model.breakdown(&z, 3.0).unwrap();
        let sum: f64 = b1.per_token.iter().map(|(e, k)| e + k).sum();
        assert!((b1.total - sum).abs() < 1e-12);
        assert!((b0.total - b1.aef).abs() < 1e-12);
        // Linear in rho for fixed attention.
        assert!((b3.total - (b1.aef + 3.0 * b1.nap)).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_oracle() {
        let layout = LayoutSpec::new(vec![
            (0, BoundingBox::new(0.05, 0.05, 0.4, 0.4).unwrap()),
            (1, BoundingBox::new(0.55, 0.55, 0.4, 0.4).unwrap()),
        ])
        .unwrap();
        let head = ToyAttentionHead::new(2, 2, 0.3, 11).unwrap();
        let model = EnergyModel::new(layout, head, 4, 4, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Array3::from_shape_fn((4, 4, 2), |_| rng.sample::<f64, _>(StandardNormal));
        for rho in [0.0, 2.5] {
            let analytic = model.gradient(&z, rho).unwrap();
            let numeric = fd_gradient_oracle(&z, |zz| model.energy(zz, rho).unwrap());
            assert!(
                relative_l2_error(&analytic, &numeric) < 1e-6,
                "rho = {rho}"
            );
        }
    }

    #[test]
    fn gradient_scales_linearly_with_energy_scale() {
        // Scaling the objective by c scales the gradient by exactly c; check
        // through the oracle on c * E.
        let layout =
            LayoutSpec::new(vec![(0, BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap())]).unwrap();
        let head = ToyAttentionHead::new(1, 2, 0.5, 2).unwrap();
        let model = EnergyModel::new(layout, head, 4, 4, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Array3::from_shape_fn((4, 4, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let g = model.gradient(&z, 1.0).unwrap();
        let g3 = fd_gradient_oracle(&z, |zz| 3.0 * model.energy(zz, 1.0).unwrap());
        let scaled = g.mapv(|v| 3.0 * v);
        assert!(relative_l2_error(&scaled, &g3) < 1e-6);
    }

    #[test]
    fn oracle_on_quadratic_and_linear_objectives() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Array3::from_shape_fn((3, 3, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let g = fd_gradient_oracle(&z, |zz| 0.5 * zz.iter().map(|v| v * v).sum::<f64>());
        assert!(relative_l2_error(&g, &z) < 1e-8);
        let dir = Array3::from_shape_fn((3, 3, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let gl = fd_gradient_oracle(&z, |zz| {
            zz.iter().zip(dir.iter()).map(|(a, b)| a * b).sum::<f64>()
        });
        assert!(relative_l2_error(&gl, &dir) < 1e-8);
    }

    #[test]
    fn small_step_descent_does_not_increase_energy() {
        let layout = LayoutSpec::new(vec![
            (0, BoundingBox::new(0.05, 0.05, 0.4, 0.4).unwrap()),
            (1, BoundingBox::new(0.55, 0.55, 0.4, 0.4).unwrap()),
        ])
        .unwrap();
        let head = ToyAttentionHead::new(2, 4, 0.2, 7).unwrap();
        let model = EnergyModel::new(layout, head, 8, 8, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = Array3::from_shape_fn((8, 8, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let e0 = model.energy(&z, 2.0).unwrap();
        let g = model.gradient(&z, 2.0).unwrap();
        let mut eta = 0.1;
        let mut ok = false;
        for _ in 0..20 {
            let z1 = &z - &g.mapv(|v| eta * v);
            if model.energy(&z1, 2.0).unwrap() <= e0 {
                ok = true;
                break;
            }
            eta /= 2.0;
        }
        assert!(ok, "descent step failed to decrease energy within 20 halvings");
    }
}

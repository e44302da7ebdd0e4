//! Scenario files: a compact JSON description of a full testbed instance —
//! grid shape, mixture prior, layout, attention head, and noising schedule.
//!
//! Component means would be unwieldy to inline as raw grids, so they are
//! generated procedurally: each component's mean is `scale * sign * g` where
//! `g` is a standard-normal grid drawn from `mean_seed`. Components sharing a
//! `mean_seed` share `g`, which makes mirrored mixtures (`sign = ±1`) easy to
//! express.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bench::GaussianMixtureLatentModel;
use crate::energy::EnergyModel;
use crate::error::{Error, Result};
use crate::grid::LayoutSpec;
use crate::head::ToyAttentionHead;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub variance: f64,
    pub mean_seed: u64,
    pub mean_scale: f64,
    /// Multiplies the generated mean; `-1` mirrors another component.
    #[serde(default = "default_sign")]
    pub mean_sign: f64,
}

fn default_sign() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadSpec {
    pub seed: u64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub alpha_bar_start: f64,
    pub alpha_bar_end: f64,
    pub steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            alpha_bar_start: 0.9999,
            alpha_bar_end: 0.01,
            steps: 50,
        }
    }
}

/// A complete testbed description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub grid: GridSpec,
    pub components: Vec<ComponentSpec>,
    pub layout: LayoutSpec,
    pub head: HeadSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
}

impl Scenario {
    /// The built-in default: a 16x16 grid with 4 channels, two mirrored
    /// mixture components, and two tokens with diagonal quarter-ish boxes.
    pub fn default_scenario() -> Scenario {
        Scenario {
            grid: GridSpec {
                height: 16,
                width: 16,
                channels: 4,
            },
            components: vec![
                ComponentSpec {
                    weight: 0.5,
                    variance: 1.0,
                    mean_seed: 1234,
                    mean_scale: 0.7,
                    mean_sign: 1.0,
                },
                ComponentSpec {
                    weight: 0.5,
                    variance: 1.0,
                    mean_seed: 1234,
                    mean_scale: 0.7,
                    mean_sign: -1.0,
                },
            ],
            layout: LayoutSpec::from_json(
                r#"{"tokens":[{"id":0,"box":[0.05,0.05,0.4,0.4]},{"id":1,"box":[0.55,0.55,0.4,0.4]}]}"#,
            )
            .expect("static default layout"),
            head: HeadSpec {
                seed: 7,
                temperature: 0.2,
            },
            schedule: ScheduleSpec::default(),
        }
    }

    pub fn from_json(json: &str) -> Result<Scenario> {
        let s: Scenario =
            serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization")
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.height == 0 || self.grid.width == 0 || self.grid.channels == 0 {
            return Err(Error::InvalidConfig("grid dimensions must be positive".into()));
        }
        self.layout.validate()?;
        if self.components.is_empty() {
            return Err(Error::InvalidConfig("scenario needs >= 1 component".into()));
        }
        Ok(())
    }

    fn component_mean(&self, spec: &ComponentSpec) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.mean_seed);
        let shape = (self.grid.height, self.grid.width, self.grid.channels);
        Array3::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
            .mapv(|v| v * spec.mean_scale * spec.mean_sign)
    }

    /// Instantiates the mixture prior.
    pub fn build_model(&self) -> Result<GaussianMixtureLatentModel> {
        GaussianMixtureLatentModel::new(
            self.components
                .iter()
                .map(|c| (c.weight, self.component_mean(c), c.variance))
                .collect(),
            self.schedule.steps,
            self.schedule.alpha_bar_start,
            self.schedule.alpha_bar_end,
        )
    }

    /// Instantiates the attention head.
    pub fn build_head(&self) -> Result<ToyAttentionHead> {
        ToyAttentionHead::new(
            self.layout.len(),
            self.grid.channels,
            self.head.temperature,
            self.head.seed,
        )
    }

    /// Instantiates the layout energy with prior concentration `lambda`.
    pub fn build_energy(&self, lambda: f64) -> Result<EnergyModel> {
        EnergyModel::new(
            self.layout.clone(),
            self.build_head()?,
            self.grid.height,
            self.grid.width,
            lambda,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_builds() {
        let s = Scenario::default_scenario();
        let model = s.build_model().unwrap();
        assert_eq!(model.shape(), (16, 16, 4));
        assert_eq!(model.n_components(), 2);
        let em = s.build_energy(4.0).unwrap();
        assert_eq!(em.layout().len(), 2);
    }

    #[test]
    fn mirrored_components_share_the_mean_grid() {
        let s = Scenario::default_scenario();
        let m0 = s.component_mean(&s.components[0]);
        let m1 = s.component_mean(&s.components[1]);
        for (a, b) in m0.iter().zip(m1.iter()) {
            assert!((a + b).abs() < 1e-15);
        }
    }

    #[test]
    fn scenario_round_trips_through_json() {
        let s = Scenario::default_scenario();
        let s2 = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(s2.grid.height, 16);
        assert_eq!(s2.components.len(), 2);
        assert_eq!(s2.head.seed, 7);
        assert!((s2.components[1].mean_sign + 1.0).abs() < 1e-15);
    }
}

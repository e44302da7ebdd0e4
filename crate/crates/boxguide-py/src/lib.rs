//! Python bindings: thin wrappers over the core layout-guidance operations
//! using plain lists/dicts so no Python-side array dependency is required.

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use boxguide::bench::{guided_sample as core_guided_sample, BackpropConfig, Baseline, TraceMode};
use boxguide::dynamics::verify_theorem1 as core_verify_theorem1;
use boxguide::energy::{
    aef_energy as core_aef, nap_divergence as core_nap, rho_at as core_rho_at, GuidanceWeights,
};
use boxguide::grid::{
    nonlocal_prior as core_prior, rasterize_mask as core_rasterize, BoundingBox, TokenAttention,
};
use boxguide::langevin::{nash_alpha_2task as core_nash, LangevinConfig, NuMode};
use boxguide::scenario::Scenario;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_box(b: [f64; 4]) -> PyResult<BoundingBox> {
    BoundingBox::new(b[0], b[1], b[2], b[3]).map_err(err)
}

fn to_array2(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let h = rows.len();
    let w = rows.first().map(|r| r.len()).unwrap_or(0);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a nonempty rectangular grid"));
    }
    Ok(Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect()).expect("shape"))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Binary mask of grid cells whose centers fall inside the box.
#[pyfunction]
fn rasterize_mask(box_: [f64; 4], height: usize, width: usize) -> PyResult<Vec<Vec<f64>>> {
    let mask = core_rasterize(&parse_box(box_)?, height, width).map_err(err)?;
    Ok(to_rows(mask.values()))
}

/// Center-weighted prior over the box's mask, zero outside.
#[pyfunction]
fn nonlocal_prior(
    box_: [f64; 4],
    height: usize,
    width: usize,
    lambda: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let tau = core_prior(&parse_box(box_)?, height, width, lambda).map_err(err)?;
    Ok(to_rows(tau.values()))
}

/// Out-of-box attention-mass energy of one token's attention grid.
#[pyfunction]
fn aef_energy(attention: Vec<Vec<f64>>, box_: [f64; 4]) -> PyResult<f64> {
    let values = to_array2(attention)?;
    let (h, w) = (values.nrows(), values.ncols());
    let att = TokenAttention::raw(values).map_err(err)?;
    let mask = core_rasterize(&parse_box(box_)?, h, w).map_err(err)?;
    core_aef(&att, &mask).map_err(err)
}

/// KL divergence of the masked attention from the box's non-local prior.
#[pyfunction]
fn nap_divergence(attention: Vec<Vec<f64>>, box_: [f64; 4], lambda: f64) -> PyResult<f64> {
    let values = to_array2(attention)?;
    let (h, w) = (values.nrows(), values.ncols());
    let att = TokenAttention::raw(values).map_err(err)?;
    let b = parse_box(box_)?;
    let mask = core_rasterize(&b, h, w).map_err(err)?;
    let tau = core_prior(&b, h, w, lambda).map_err(err)?;
    core_nap(&att, &tau, &mask).map_err(err)
}

/// Linearly annealed regularizer weight at a guided step.
#[pyfunction]
#[pyo3(signature = (step, rho_max=5.0, rho_min=0.0, guidance_steps=10))]
fn rho_at(step: usize, rho_max: f64, rho_min: f64, guidance_steps: usize) -> PyResult<f64> {
    let weights = GuidanceWeights {
        rho_max,
        rho_min,
        guidance_steps,
        ..GuidanceWeights::default()
    };
    core_rho_at(step, &weights).map_err(err)
}

/// Closed-form two-task bargaining weights (alpha1, alpha2).
#[pyfunction]
fn nash_alpha_2task(g1: Vec<f64>, g2: Vec<f64>) -> PyResult<(f64, f64)> {
    core_nash(&g1, &g2).map_err(err)
}

/// Randomized ratio-amplification harness; returns a summary dict.
#[pyfunction]
#[pyo3(signature = (trials=1000, seed=0))]
fn verify_theorem1(py: Python<'_>, trials: usize, seed: u64) -> PyResult<Bound<'_, PyDict>> {
    let r = core_verify_theorem1(trials, seed).map_err(err)?;
    let d = PyDict::new_bound(py);
    d.set_item("trials", r.trials)?;
    d.set_item("passed", r.passed)?;
    d.set_item("pass_fraction", r.pass_fraction)?;
    d.set_item("max_violation", r.max_violation)?;
    d.set_item("max_identity_error", r.max_identity_error)?;
    Ok(d)
}

/// The built-in default scenario as a JSON string.
#[pyfunction]
fn default_scenario() -> String {
    Scenario::default_scenario().to_json()
}

/// Runs one guided sample and returns its layout metrics as a dict.
#[pyfunction]
#[pyo3(signature = (scenario_json=None, baseline="langevin-adaptive", seed=0, rho_max=5.0, rho_min=0.0, fixed_nu=1.0))]
fn guided_sample<'py>(
    py: Python<'py>,
    scenario_json: Option<&str>,
    baseline: &str,
    seed: u64,
    rho_max: f64,
    rho_min: f64,
    fixed_nu: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let scenario = match scenario_json {
        Some(s) => Scenario::from_json(s).map_err(err)?,
        None => Scenario::default_scenario(),
    };
    let mut langevin = LangevinConfig::default();
    let arm = match baseline {
        "none" => Baseline::None,
        "backprop" => Baseline::Backprop,
        "langevin-adaptive" => Baseline::Langevin,
        "langevin-fixed" => {
            langevin.nu_mode = NuMode::Fixed(fixed_nu);
            Baseline::Langevin
        }
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown baseline '{other}'"
            )))
        }
    };
    let guidance = GuidanceWeights {
        rho_max,
        rho_min,
        total_steps: scenario.schedule.steps,
        ..GuidanceWeights::default()
    };
    let model = scenario.build_model().map_err(err)?;
    let energy = scenario.build_energy(guidance.lambda).map_err(err)?;
    let run = core_guided_sample(
        &model,
        &energy,
        &guidance,
        &langevin,
        &BackpropConfig::default(),
        arm,
        seed,
        TraceMode::None,
    )
    .map_err(err)?;
    let d = PyDict::new_bound(py);
    d.set_item("coverage", run.metrics.coverage)?;
    d.set_item("spread", run.metrics.spread)?;
    d.set_item("loglik", run.metrics.loglik)?;
    d.set_item("coverage_per_token", run.metrics.coverage_per_token)?;
    d.set_item("spread_per_token", run.metrics.spread_per_token)?;
    d.set_item("argmax_in_box", run.metrics.argmax_in_box)?;
    Ok(d)
}

#[pymodule]
fn boxguide_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(rasterize_mask, m)?)?;
    m.add_function(wrap_pyfunction!(nonlocal_prior, m)?)?;
    m.add_function(wrap_pyfunction!(aef_energy, m)?)?;
    m.add_function(wrap_pyfunction!(nap_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(rho_at, m)?)?;
    m.add_function(wrap_pyfunction!(nash_alpha_2task, m)?)?;
    m.add_function(wrap_pyfunction!(verify_theorem1, m)?)?;
    m.add_function(wrap_pyfunction!(default_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(guided_sample, m)?)?;
    Ok(())
}

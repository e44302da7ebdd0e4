//! Experiment orchestration: a plan of (baseline, seed) cells, parallel
//! execution with per-seed initial noise shared across baselines, and
//! deterministic report/CSV emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use boxguide::bench::{
    guided_sample, Baseline, BackpropConfig, BenchMetrics, TraceMode,
};
use boxguide::dynamics::verify_theorem1;
use boxguide::energy::GuidanceWeights;
use boxguide::langevin::{LangevinConfig, NuMode};
use boxguide::scenario::Scenario;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::report::{csv_float, deterministic_json};
use crate::verify::nash_suite;

/// A named refinement arm of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineChoice {
    None,
    Backprop,
    LangevinFixed,
    LangevinAdaptive,
}

impl BaselineChoice {
    pub const ALL: [BaselineChoice; 4] = [
        BaselineChoice::None,
        BaselineChoice::Backprop,
        BaselineChoice::LangevinFixed,
        BaselineChoice::LangevinAdaptive,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BaselineChoice::None),
            "backprop" => Ok(BaselineChoice::Backprop),
            "langevin-fixed" => Ok(BaselineChoice::LangevinFixed),
            "langevin-adaptive" => Ok(BaselineChoice::LangevinAdaptive),
            other => bail!(
                "unknown baseline '{other}' (expected none|backprop|langevin-fixed|langevin-adaptive)"
            ),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselineChoice::None => "none",
            BaselineChoice::Backprop => "backprop",
            BaselineChoice::LangevinFixed => "langevin-fixed",
            BaselineChoice::LangevinAdaptive => "langevin-adaptive",
        }
    }

    /// The sampler baseline plus the Langevin config this arm runs with.
    fn instantiate(&self, base: &LangevinConfig, fixed_nu: f64) -> (Baseline, LangevinConfig) {
        match self {
            BaselineChoice::None => (Baseline::None, *base),
            BaselineChoice::Backprop => (Baseline::Backprop, *base),
            BaselineChoice::LangevinFixed => (
                Baseline::Langevin,
                LangevinConfig {
                    nu_mode: NuMode::Fixed(fixed_nu),
                    ..*base
                },
            ),
            BaselineChoice::LangevinAdaptive => (
                Baseline::Langevin,
                LangevinConfig {
                    nu_mode: NuMode::Adaptive,
                    ..*base
                },
            ),
        }
    }
}

/// Everything needed to run one experiment grid.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub scenario: Scenario,
    pub baselines: Vec<BaselineChoice>,
    pub seeds: Vec<u64>,
    pub guidance: GuidanceWeights,
    pub langevin: LangevinConfig,
    pub backprop: BackpropConfig,
    /// The constant weight used by the `langevin-fixed` arm.
    pub fixed_nu: f64,
    pub trace: TraceMode,
    /// Worker threads; 0 means one per logical core.
    pub jobs: usize,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn new(scenario: Scenario) -> Self {
        let guidance = GuidanceWeights {
            total_steps: scenario.schedule.steps,
            ..GuidanceWeights::default()
        };
        ExperimentPlan {
            scenario,
            baselines: BaselineChoice::ALL.to_vec(),
            seeds: (0..10).collect(),
            guidance,
            langevin: LangevinConfig::default(),
            backprop: BackpropConfig::default(),
            fixed_nu: 1.0,
            trace: TraceMode::None,
            jobs: 0,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.baselines.is_empty() {
            bail!("plan has no baselines");
        }
        if self.seeds.is_empty() {
            bail!("plan has no seeds");
        }
        self.scenario.validate()?;
        self.guidance.validate()?;
        self.langevin.validate()?;
        if self.fixed_nu < 0.0 {
            bail!("fixed nu must be nonnegative");
        }
        Ok(())
    }
}

/// One grid cell's outcome: metrics on success, the error text otherwise.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub baseline: String,
    pub seed: u64,
    pub metrics: Option<BenchMetrics>,
    pub error: Option<String>,
}

/// Mean, median, and population standard deviation of one metric.
#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    Aggregate { mean, median, std }
}

/// Fraction of shared seeds on which the first baseline's metric exceeds the
/// second's.
#[derive(Debug, Clone, Serialize)]
pub struct WinRates {
    pub coverage: f64,
    pub spread: f64,
    pub loglik: f64,
    pub seeds: usize,
}

/// The full experiment outcome.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub version: String,
    pub config: serde_json::Value,
    pub runs: Vec<RunRecord>,
    /// Per baseline, per metric name.
    pub aggregates: BTreeMap<String, BTreeMap<String, Aggregate>>,
    /// Keyed `a_vs_b` for each ordered baseline pair.
    pub win_rates: BTreeMap<String, WinRates>,
    pub theorem1: serde_json::Value,
    pub nash: serde_json::Value,
    pub failed: usize,
}

fn resolved_config(plan: &ExperimentPlan) -> serde_json::Value {
    json!({
        "scenario": plan.scenario,
        "baselines": plan.baselines.iter().map(|b| b.name()).collect::<Vec<_>>(),
        "seeds": plan.seeds,
        "guidance": plan.guidance,
        "langevin": plan.langevin,
        "backprop": plan.backprop,
        "fixed_nu": plan.fixed_nu,
        "trace": plan.trace,
    })
}

/// Runs every (baseline, seed) cell, optionally writing per-run traces and
/// the report files under the plan's output directory. Per-cell failures are
/// recorded; the remaining cells still run.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<Report> {
    plan.validate()?;
    let model = plan.scenario.build_model()?;
    let energy = plan.scenario.build_energy(plan.guidance.lambda)?;
    let cells: Vec<(BaselineChoice, u64)> = plan
        .baselines
        .iter()
        .flat_map(|b| plan.seeds.iter().map(move |s| (*b, *s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.jobs)
        .build()
        .context("building worker pool")?;
    // Ordered map keeps the reduction deterministic regardless of scheduling.
    let outcomes: Vec<_> = pool.install(|| {
        cells
            .par_iter()
            .map(|(choice, seed)| {
                let (baseline, langevin) = choice.instantiate(&plan.langevin, plan.fixed_nu);
                let run = guided_sample(
                    &model,
                    &energy,
                    &plan.guidance,
                    &langevin,
                    &plan.backprop,
                    baseline,
                    *seed,
                    plan.trace,
                );
                (*choice, *seed, run)
            })
            .collect()
    });

    let mut runs = Vec::with_capacity(outcomes.len());
    let mut failed = 0usize;
    let mut by_baseline: BTreeMap<String, BTreeMap<u64, (f64, f64, f64)>> = BTreeMap::new();
    for (choice, seed, outcome) in &outcomes {
        match outcome {
            Ok(run) => {
                by_baseline.entry(choice.name().to_string()).or_default().insert(
                    *seed,
                    (run.metrics.coverage, run.metrics.spread, run.metrics.loglik),
                );
                runs.push(RunRecord {
                    baseline: choice.name().to_string(),
                    seed: *seed,
                    metrics: Some(run.metrics.clone()),
                    error: None,
                });
            }
            Err(e) => {
                failed += 1;
                runs.push(RunRecord {
                    baseline: choice.name().to_string(),
                    seed: *seed,
                    metrics: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }

    let mut aggregates = BTreeMap::new();
    for (name, seeds) in &by_baseline {
        let mut m = BTreeMap::new();
        let cov: Vec<f64> = seeds.values().map(|v| v.0).collect();
        let spr: Vec<f64> = seeds.values().map(|v| v.1).collect();
        let ll: Vec<f64> = seeds.values().map(|v| v.2).collect();
        m.insert("coverage".to_string(), aggregate(&cov));
        m.insert("spread".to_string(), aggregate(&spr));
        m.insert("loglik".to_string(), aggregate(&ll));
        aggregates.insert(name.clone(), m);
    }

    let mut win_rates = BTreeMap::new();
    let names: Vec<&String> = by_baseline.keys().collect();
    for a in &names {
        for b in &names {
            if a == b {
                continue;
            }
            let (sa, sb) = (&by_baseline[*a], &by_baseline[*b]);
            let shared: Vec<u64> = sa.keys().filter(|k| sb.contains_key(k)).cloned().collect();
            if shared.is_empty() {
                continue;
            }
            let frac = |f: fn(&(f64, f64, f64)) -> f64| {
                shared.iter().filter(|s| f(&sa[s]) > f(&sb[s])).count() as f64
                    / shared.len() as f64
            };
            win_rates.insert(
                format!("{a}_vs_{b}"),
                WinRates {
                    coverage: frac(|v| v.0),
                    spread: frac(|v| v.1),
                    loglik: frac(|v| v.2),
                    seeds: shared.len(),
                },
            );
        }
    }

    let theorem1 = serde_json::to_value(verify_theorem1(1000, 0)?)?;
    let nash = serde_json::to_value(nash_suite(1000, 0)?)?;
    let report = Report {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: resolved_config(plan),
        runs,
        aggregates,
        win_rates,
        theorem1,
        nash,
        failed,
    };

    if let Some(dir) = &plan.out_dir {
        fs::create_dir_all(dir)?;
        if plan.trace != TraceMode::None {
            let traces = dir.join("traces");
            fs::create_dir_all(&traces)?;
            for (choice, seed, outcome) in &outcomes {
                if let Ok(run) = outcome {
                    let v = serde_json::to_value(&run.trace)?;
                    fs::write(
                        traces.join(format!("{}_{seed}.json", choice.name())),
                        deterministic_json(&v),
                    )?;
                }
            }
        }
        emit_report(&report, dir)?;
    }
    Ok(report)
}

/// Writes `report.json` (deterministic JSON) and `report.csv` (per-run
/// metrics table) into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let v = serde_json::to_value(report)?;
    fs::write(dir.join("report.json"), deterministic_json(&v))
        .with_context(|| format!("writing report.json in {}", dir.display()))?;

    let tokens = report
        .runs
        .iter()
        .filter_map(|r| r.metrics.as_ref())
        .map(|m| m.coverage_per_token.len())
        .max()
        .unwrap_or(0);
    let mut csv = String::from("baseline,seed,coverage,spread,loglik,argmax_in_box");
    for i in 0..tokens {
        csv.push_str(&format!(",coverage_t{i},spread_t{i},argmax_t{i}"));
    }
    csv.push_str(",error\n");
    for r in &report.runs {
        match &r.metrics {
            Some(m) => {
                let argmax_frac = m.argmax_in_box.iter().filter(|b| **b).count() as f64
                    / m.argmax_in_box.len() as f64;
                csv.push_str(&format!(
                    "{},{},{},{},{},{}",
                    r.baseline,
                    r.seed,
                    csv_float(m.coverage),
                    csv_float(m.spread),
                    csv_float(m.loglik),
                    csv_float(argmax_frac),
                ));
                for i in 0..tokens {
                    csv.push_str(&format!(
                        ",{},{},{}",
                        csv_float(m.coverage_per_token[i]),
                        csv_float(m.spread_per_token[i]),
                        m.argmax_in_box[i],
                    ));
                }
                csv.push_str(",\n");
            }
            None => {
                csv.push_str(&format!("{},{}", r.baseline, r.seed));
                csv.push_str(&",".repeat(4 + 3 * tokens));
                csv.push_str(&format!(
                    ",{}\n",
                    r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
                ));
            }
        }
    }
    fs::write(dir.join("report.csv"), csv)
        .with_context(|| format!("writing report.csv in {}", dir.display()))?;
    Ok(())
}

//! Benchmark and verification front end.
//!
//! Exit codes: 0 success, 1 failed run or failed verification, 2 config or
//! parse error.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use boxguide::bench::{Baseline, TraceMode};
use boxguide::dynamics::verify_theorem1;
use boxguide::scenario::Scenario;
use clap::{Args, Parser, Subcommand};

use boxguide_cli::experiment::{run_experiment, BaselineChoice, ExperimentPlan};
use boxguide_cli::render::render_heatmap;
use boxguide_cli::report::deterministic_json;
use boxguide_cli::verify::{gradcheck_suite, langevin_moments, langevin_oracle_tv, nash_suite};

#[derive(Parser)]
#[command(name = "boxguide", version, about = "Layout-guidance benchmark harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Benchmark experiments.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
    /// Standalone mathematical verification suites.
    Verify {
        #[command(subcommand)]
        cmd: VerifyCmd,
    },
    /// Render attention heatmaps for one guided run.
    Render(RenderArgs),
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Run a (baseline x seed) experiment grid and emit a report.
    Run(BenchArgs),
}

/// Config overrides shared by `bench run` and `render`. Precedence: CLI flag
/// > scenario file > built-in default.
#[derive(Args, Clone)]
struct Overrides {
    /// Scenario JSON file; omitted means the built-in default scenario.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Max regularizer weight at the start of the guidance window.
    #[arg(long)]
    rho_max: Option<f64>,
    /// Min regularizer weight at the end of the guidance window.
    #[arg(long)]
    rho_min: Option<f64>,
    /// Prior concentration.
    #[arg(long)]
    lambda: Option<f64>,
    /// Signal-to-noise ratio of the sampler step size.
    #[arg(long)]
    snr: Option<f64>,
    /// Inner sampler iterations per guided step.
    #[arg(long)]
    langevin_steps: Option<usize>,
    /// Number of guided denoising steps.
    #[arg(long)]
    guidance_steps: Option<usize>,
    /// Total denoising steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Gradient-descent baseline step strength.
    #[arg(long)]
    eta: Option<f64>,
    /// Gradient-descent baseline iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Constant weight for the langevin-fixed arm.
    #[arg(long)]
    fixed_nu: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Baselines to run (repeatable): none|backprop|langevin-fixed|langevin-adaptive.
    #[arg(long = "baseline", num_args = 1..)]
    baselines: Vec<String>,
    /// Either a count N (seeds 0..N) or a comma-separated list.
    #[arg(long, default_value = "10")]
    seeds: String,
    /// Worker threads; 0 means one per core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output directory for report.json / report.csv / traces.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-run history: none, norms, or full.
    #[arg(long, default_value = "none")]
    trace: String,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Refinement arm to render.
    #[arg(long, default_value = "langevin-adaptive")]
    baseline: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; one PGM per token is written.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum VerifyCmd {
    /// Ratio-amplification theorem harness.
    Theorem1 {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Closed-form two-task bargaining weights.
    Nash {
        #[arg(long, default_value_t = 1_000)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analytic vs finite-difference energy gradients.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sampler vs brute-force posterior on a two-coordinate instance.
    LangevinOracle {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 5_000)]
        burn_in: usize,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_scenario(path: &Option<PathBuf>) -> Result<Scenario> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading scenario {}", p.display()))?;
            Ok(Scenario::from_json(&text)?)
        }
        None => Ok(Scenario::default_scenario()),
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if s.contains(',') {
        s.split(',')
            .map(|v| v.trim().parse::<u64>().context("parsing seed list"))
            .collect()
    } else {
        let n: u64 = s.trim().parse().context("parsing seed count")?;
        if n == 0 {
            bail!("seed count must be positive");
        }
        Ok((0..n).collect())
    }
}

fn parse_trace(s: &str) -> Result<TraceMode> {
    match s {
        "none" => Ok(TraceMode::None),
        "norms" => Ok(TraceMode::Norms),
        "full" => Ok(TraceMode::Full),
        other => bail!("unknown trace mode '{other}' (expected none|norms|full)"),
    }
}

fn build_plan(overrides: &Overrides) -> Result<ExperimentPlan> {
    let scenario = load_scenario(&overrides.scenario)?;
    let mut plan = ExperimentPlan::new(scenario);
    if let Some(v) = overrides.rho_max {
        plan.guidance.rho_max = v;
    }
    if let Some(v) = overrides.rho_min {
        plan.guidance.rho_min = v;
    }
    if let Some(v) = overrides.lambda {
        plan.guidance.lambda = v;
    }
    if let Some(v) = overrides.snr {
        plan.langevin.snr = v;
    }
    if let Some(v) = overrides.langevin_steps {
        plan.langevin.inner_steps = v;
    }
    if let Some(v) = overrides.guidance_steps {
        plan.guidance.guidance_steps = v;
    }
    if let Some(v) = overrides.steps {
        plan.guidance.total_steps = v;
        plan.scenario.schedule.steps = v;
    }
    if let Some(v) = overrides.eta {
        plan.backprop.eta = v;
    }
    if let Some(v) = overrides.iters {
        plan.backprop.iters = v;
    }
    if let Some(v) = overrides.fixed_nu {
        plan.fixed_nu = v;
    }
    Ok(plan)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let v = serde_json::to_value(value)?;
    print!("{}", deterministic_json(&v));
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<u8> {
    let mut plan = build_plan(&args.overrides).map_err(ConfigError::wrap)?;
    if !args.baselines.is_empty() {
        plan.baselines = args
            .baselines
            .iter()
            .map(|s| BaselineChoice::parse(s))
            .collect::<Result<_>>()
            .map_err(ConfigError::wrap)?;
    }
    plan.seeds = parse_seeds(&args.seeds).map_err(ConfigError::wrap)?;
    plan.trace = parse_trace(&args.trace).map_err(ConfigError::wrap)?;
    plan.jobs = args.jobs;
    plan.out_dir = args.out.clone();
    let report = run_experiment(&plan).map_err(ConfigError::wrap)?;
    print_json(&report)?;
    Ok(if report.failed > 0 { 1 } else { 0 })
}

fn cmd_render(args: &RenderArgs) -> Result<u8> {
    let plan = build_plan(&args.overrides).map_err(ConfigError::wrap)?;
    let choice = BaselineChoice::parse(&args.baseline).map_err(ConfigError::wrap)?;
    let model = plan.scenario.build_model().map_err(ConfigError::wrap)?;
    let energy = plan
        .scenario
        .build_energy(plan.guidance.lambda)
        .map_err(ConfigError::wrap)?;
    let (baseline, langevin) = match choice {
        BaselineChoice::None => (Baseline::None, plan.langevin),
        BaselineChoice::Backprop => (Baseline::Backprop, plan.langevin),
        BaselineChoice::LangevinFixed => (
            Baseline::Langevin,
            boxguide::langevin::LangevinConfig {
                nu_mode: boxguide::langevin::NuMode::Fixed(plan.fixed_nu),
                ..plan.langevin
            },
        ),
        BaselineChoice::LangevinAdaptive => (Baseline::Langevin, plan.langevin),
    };
    let run = boxguide::bench::guided_sample(
        &model,
        &energy,
        &plan.guidance,
        &langevin,
        &plan.backprop,
        baseline,
        args.seed,
        TraceMode::None,
    )?;
    fs::create_dir_all(&args.out)?;
    let attentions = energy.attentions(&run.latent)?;
    for (i, att) in attentions.iter().enumerate() {
        let normalized = att.normalize_global()?;
        let path = args.out.join(format!("token_{i}.pgm"));
        render_heatmap(&normalized, energy.layout(), &path)?;
        eprintln!("wrote {}", path.display());
    }
    print_json(&run.metrics)?;
    Ok(0)
}

fn cmd_verify(cmd: &VerifyCmd) -> Result<u8> {
    match cmd {
        VerifyCmd::Theorem1 { trials, seed } => {
            let report = verify_theorem1(*trials, *seed)?;
            print_json(&report)?;
            Ok(if report.pass_fraction == 1.0 && report.max_identity_error <= 1e-12 {
                0
            } else {
                1
            })
        }
        VerifyCmd::Nash { pairs, seed } => {
            let s = nash_suite(*pairs, *seed)?;
            print_json(&s)?;
            Ok(if s.max_residual < 1e-8 && s.max_ratio_error < 1e-10 {
                0
            } else {
                1
            })
        }
        VerifyCmd::Gradcheck { instances, seed } => {
            let s = gradcheck_suite(*instances, *seed)?;
            print_json(&s)?;
            Ok(if s.max_rel_error < 1e-4 { 0 } else { 1 })
        }
        VerifyCmd::LangevinOracle {
            samples,
            burn_in,
            bins,
            seed,
        } => {
            let s = langevin_oracle_tv(*samples, *burn_in, *bins, *seed)?;
            print_json(&s)?;
            let moments = langevin_moments(5_000, 50_000, 0.06, *seed)?;
            print_json(&moments)?;
            let pass = s.tv_distance < 0.15
                && moments.mean.abs() < 0.05
                && (moments.variance - 1.0).abs() < 0.1;
            Ok(if pass { 0 } else { 1 })
        }
    }
}

/// Marker for errors that should exit with status 2.
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl ConfigError {
    fn wrap<E: Into<anyhow::Error>>(e: E) -> anyhow::Error {
        anyhow::Error::new(ConfigError(e.into()))
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for ConfigError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Bench { cmd: BenchCmd::Run(args) } => cmd_bench(args),
        Cmd::Verify { cmd } => cmd_verify(cmd),
        Cmd::Render(args) => cmd_render(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            // Configuration and parse problems exit 2; runtime failures 1.
            let config = e.downcast_ref::<ConfigError>().is_some();
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}

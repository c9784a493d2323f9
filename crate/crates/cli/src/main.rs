use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::Value;

use slsmn::blt::BltOperator;
use slsmn::harness::{evaluate, export_json, import_json, trend_test, ExperimentConfig};
use slsmn::model::MultNoiseSystem;
use slsmn::scenario::{solve_p7, ScenarioConfig};
use slsmn::sls::{controller_from_response, nominal_sls_solve, CostModel, SystemResponse};
use slsmn::sysid::{identify_with, DataBatch, IdentifyOptions};
use slsmn::uncertainty::{build_theta, chernoff_radius, lambda_bound, state_ellipsoid, LambdaMethod};

#[derive(Parser)]
#[command(name = "slsmn", version, about = "LQR synthesis for systems with multiplicative noise")]
struct Cli {
    /// Master seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file; JSON results go to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Nominal,
    Scenario,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a multiplicative-noise model to a state-input trajectory.
    Identify {
        #[arg(long)]
        data: PathBuf,
        /// Additive-noise variances, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        alpha: Vec<f64>,
        /// Estimate the variances from the fit residual instead.
        #[arg(long)]
        estimate_alpha: bool,
    },
    /// Compute a controller.
    Synthesize {
        #[arg(long, value_enum, default_value = "nominal")]
        mode: Mode,
        #[arg(long)]
        system: PathBuf,
        #[arg(long)]
        cost: PathBuf,
        #[arg(long)]
        horizon: usize,
        #[arg(long, default_value_t = ScenarioConfig::default().eps_tol)]
        eps_tol: f64,
        #[arg(long, default_value_t = ScenarioConfig::default().eps_risk)]
        eps_risk: f64,
        #[arg(long, default_value_t = ScenarioConfig::default().beta)]
        beta: f64,
        /// Scenario count; defaults to the sample-size bound.
        #[arg(long)]
        scenarios: Option<usize>,
    },
    /// Monte Carlo cost of a controller.
    Evaluate {
        #[arg(long)]
        system: PathBuf,
        /// Controller JSON, or a synthesis result containing one.
        #[arg(long)]
        controller: PathBuf,
        #[arg(long)]
        cost: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        x0: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        rollouts: usize,
    },
    /// Variance bound, Chernoff radius and one-step ellipsoid coverage.
    Bound {
        #[arg(long)]
        system: PathBuf,
        /// Response JSON, or a synthesis result containing one.
        #[arg(long)]
        response: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        /// State at which the one-step ellipsoid is built; defaults to ones.
        #[arg(long, value_delimiter = ',')]
        x0: Option<Vec<f64>>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// Scenario-count sweep from a config file; writes CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Write zero solve times so the CSV is byte-reproducible.
        #[arg(long)]
        no_timing: bool,
    },
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => export_json(value, path).with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn load<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    import_json(path).with_context(|| format!("reading {}", path.display()))
}

/// Reads either the object itself or the member `key` of a wrapper document.
fn load_member<T: for<'de> serde::Deserialize<'de>>(path: &Path, key: &str) -> Result<T> {
    let value: Value = load(path)?;
    let inner = match value.get(key) {
        Some(v) => v.clone(),
        None => value,
    };
    serde_json::from_value(inner).with_context(|| format!("parsing {} from {}", key, path.display()))
}

#[derive(Serialize)]
struct NominalOutput {
    response: SystemResponse,
    controller: BltOperator,
    objective: f64,
    rank_deficient: bool,
}

#[derive(Serialize)]
struct BoundOutput {
    lambda: f64,
    chernoff_radius: f64,
    eps: f64,
    coverage: f64,
    samples: usize,
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::Identify { data, alpha, estimate_alpha } => {
            let batch = DataBatch::read_csv(&data, alpha).with_context(|| format!("reading {}", data.display()))?;
            let sys = identify_with(&batch, IdentifyOptions { estimate_alpha })?;
            emit(&sys, out)
        }
        Command::Synthesize { mode, system, cost, horizon, eps_tol, eps_risk, beta, scenarios } => {
            let sys: MultNoiseSystem = load(&system)?;
            let cost: CostModel = load(&cost)?;
            match mode {
                Mode::Nominal => {
                    let sol = nominal_sls_solve(&sys, &cost, horizon)?;
                    let controller = controller_from_response(&sol.response)?;
                    emit(
                        &NominalOutput {
                            response: sol.response,
                            controller,
                            objective: sol.objective,
                            rank_deficient: sol.rank_deficient,
                        },
                        out,
                    )
                }
                Mode::Scenario => {
                    let cfg =
                        ScenarioConfig { eps_tol, eps_risk, beta, scenarios, seed: cli.seed, ..Default::default() };
                    let res = solve_p7(&sys, &cost, horizon, &cfg)?;
                    log::info!(
                        "status {}, alpha {:.6}, N {} (bound {}), lambda {:.4e}",
                        res.qp_status,
                        res.alpha,
                        res.n_scenarios,
                        res.n_required,
                        res.lambda
                    );
                    emit(&res, out)
                }
            }
        }
        Command::Evaluate { system, controller, cost, x0, rollouts } => {
            let sys: MultNoiseSystem = load(&system)?;
            let k: BltOperator = load_member(&controller, "controller")?;
            let cost: CostModel = load(&cost)?;
            let report = evaluate(&sys, &k, &cost, &DVector::from_vec(x0), rollouts, cli.seed)?;
            emit(&report, out)
        }
        Command::Bound { system, response, eps, x0, samples } => {
            let sys: MultNoiseSystem = load(&system)?;
            let resp: SystemResponse = load_member(&response, "response")?;
            let horizon = resp.horizon();
            let k = controller_from_response(&resp)?;
            let theta = build_theta(&k, &sys, horizon)?;
            let lambda = lambda_bound(&theta.theta, &sys.sigma, sys.n(), LambdaMethod::ClosedForm, 0)?;
            let radius = chernoff_radius(sys.n_delta(), eps)?;
            let x = DVector::from_vec(x0.unwrap_or_else(|| vec![1.0; sys.n()]));
            let k0 = k.block(0, 0).clone();
            let zero = DVector::zeros(sys.n());
            let ell = state_ellipsoid(&sys, &k0, &x, &zero, eps)?;
            let sampler = sys.delta_dist.sampler()?;
            let mut inside = 0usize;
            for i in 0..samples {
                let mut rng = slsmn::rng::rng_from_seed(slsmn::rng::derive_seed(cli.seed, i as u64));
                let delta: Vec<f64> = sys.sigma.iter().map(|s| s * sampler.sample(&mut rng)).collect();
                let next = slsmn::model::step(&sys, &x, &(&k0 * &x), &delta, &zero)?;
                inside += usize::from(ell.contains(&next));
            }
            let coverage = if samples > 0 { inside as f64 / samples as f64 } else { f64::NAN };
            println!("lambda          {lambda:.6e}");
            println!("chernoff radius {radius:.6}");
            println!("coverage        {coverage:.4} (target {:.4})", 1.0 - eps);
            if let Some(path) = out {
                export_json(&BoundOutput { lambda, chernoff_radius: radius, eps, coverage, samples }, path)?;
            }
            Ok(())
        }
        Command::Sweep { config, no_timing } => {
            let mut cfg: ExperimentConfig = load(&config)?;
            if cli.seed != 0 {
                cfg.seed = cli.seed;
            }
            let report = cfg.run_sweep(!no_timing)?;
            let path = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("sweep.csv"));
            report.export_csv(&path).with_context(|| format!("writing {}", path.display()))?;
            for a in &report.aggregates {
                println!(
                    "N={:<6} ok={:<3} mean={:.6} band=[{:.6}, {:.6}]",
                    a.n, a.successful, a.mean_cost, a.band_q10, a.band_q90
                );
            }
            let trend = trend_test(&report, 0.05);
            println!(
                "mean non-increasing: {}; dispersion non-increasing: {}",
                trend.mean_nonincreasing(),
                trend.dispersion_nonincreasing()
            );
            if report.rows.iter().all(|r| !r.is_ok()) {
                bail!("every sweep cell failed");
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

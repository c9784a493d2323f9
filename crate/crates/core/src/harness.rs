//! Monte Carlo evaluation, the scenario-count sweep and file formats.

use std::path::Path;
use std::time::Instant;

use nalgebra::{dmatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::blt::BltOperator;
use crate::error::{dim_err, Error, Result};
use crate::model::{quadratic_cost, rollout, sample_noise, MultNoiseSystem};
use crate::qp::QpStatus;
use crate::rng::derive_seed;
use crate::scenario::{solve_p7, ScenarioConfig, SynthesisResult};
use crate::sls::{CostModel, WSpec};

/// Quantile of sorted data with linear interpolation between order
/// statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        len => {
            let h = p.clamp(0.0, 1.0) * (len - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
}

impl Band {
    fn of(values: &[f64]) -> Band {
        let s = sorted(values);
        Band { q10: quantile(&s, 0.1), q50: quantile(&s, 0.5), q90: quantile(&s, 0.9) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_rollouts: usize,
    pub seed: u64,
    pub mean_cost: f64,
    pub std_error: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
    pub min_cost: f64,
    pub max_cost: f64,
    /// `state_bands[t][j]` summarizes state `j` at time `t`.
    pub state_bands: Vec<Vec<Band>>,
    pub input_bands: Vec<Vec<Band>>,
}

/// Closed-loop cost over `n_rollouts` independent noise traces. Trace `i`
/// depends only on `(seed, i)`, so two controllers evaluated with the same
/// seed see identical noise.
pub fn evaluate(
    sys: &MultNoiseSystem,
    k: &BltOperator,
    cost: &CostModel,
    x0: &DVector<f64>,
    n_rollouts: usize,
    seed: u64,
) -> Result<EvalReport> {
    let horizon = k.horizon();
    if n_rollouts == 0 {
        return Err(Error::Parameter { name: "n_rollouts", value: 0.0, range: "[1, inf)" });
    }
    if cost.q.nrows() != sys.n() || cost.r.nrows() != sys.m() {
        return dim_err("cost does not match the system");
    }
    let (n, m) = (sys.n(), sys.m());
    let mut costs = Vec::with_capacity(n_rollouts);
    let mut states = vec![vec![Vec::with_capacity(n_rollouts); n]; horizon];
    let mut inputs = vec![vec![Vec::with_capacity(n_rollouts); m]; horizon];
    for i in 0..n_rollouts {
        let trace = sample_noise(sys, horizon, x0, derive_seed(seed, i as u64))?;
        let traj = rollout(sys, k, &trace)?;
        costs.push(quadratic_cost(&traj, &cost.q, &cost.r));
        for t in 0..horizon {
            for j in 0..n {
                states[t][j].push(traj.states[(t, j)]);
            }
            for j in 0..m {
                inputs[t][j].push(traj.inputs[(t, j)]);
            }
        }
    }
    let count = n_rollouts as f64;
    let mean = costs.iter().sum::<f64>() / count;
    let var = if n_rollouts > 1 { costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (count - 1.0) } else { 0.0 };
    let s = sorted(&costs);
    let bands = |per: Vec<Vec<Vec<f64>>>| per.iter().map(|row| row.iter().map(|v| Band::of(v)).collect()).collect();
    Ok(EvalReport {
        n_rollouts,
        seed,
        mean_cost: mean,
        std_error: (var / count).sqrt(),
        q10: quantile(&s, 0.1),
        q50: quantile(&s, 0.5),
        q90: quantile(&s, 0.9),
        min_cost: s[0],
        max_cost: s[s.len() - 1],
        state_bands: bands(states),
        input_bands: bands(inputs),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub repeat: usize,
    pub status: String,
    pub alpha: f64,
    pub mean_cost: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
    pub max_violation: f64,
    pub solve_ms: f64,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == QpStatus::Optimal.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub n: usize,
    pub successful: usize,
    /// Mean over repeats of each repeat's mean cost.
    pub mean_cost: f64,
    /// 10% and 90% quantiles over repeats of the mean cost.
    pub band_q10: f64,
    pub band_q90: f64,
}

impl SweepAggregate {
    pub fn band_width(&self) -> f64 {
        self.band_q90 - self.band_q10
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<SweepAggregate>,
}

impl SweepReport {
    /// Aggregates successful rows per scenario count, in order of first
    /// appearance.
    pub fn from_rows(rows: Vec<SweepRow>) -> Self {
        let mut ns: Vec<usize> = Vec::new();
        for r in &rows {
            if !ns.contains(&r.n) {
                ns.push(r.n);
            }
        }
        let aggregates = ns
            .into_iter()
            .map(|n| {
                let costs: Vec<f64> = rows.iter().filter(|r| r.n == n && r.is_ok()).map(|r| r.mean_cost).collect();
                let s = sorted(&costs);
                SweepAggregate {
                    n,
                    successful: costs.len(),
                    mean_cost: if costs.is_empty() { f64::NAN } else { costs.iter().sum::<f64>() / costs.len() as f64 },
                    band_q10: quantile(&s, 0.1),
                    band_q90: quantile(&s, 0.9),
                }
            })
            .collect();
        SweepReport { rows, aggregates }
    }

    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        // The header is written explicitly so that an empty report still has one.
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        w.write_record(SWEEP_COLUMNS)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn import_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>()?;
        Ok(SweepReport::from_rows(rows))
    }
}

pub const SWEEP_COLUMNS: [&str; 10] =
    ["N", "repeat", "status", "alpha", "mean_cost", "q10", "q50", "q90", "max_violation", "solve_ms"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub n_rollouts: usize,
    pub x0: Vec<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { n_rollouts: 1000, x0: vec![1.0] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub n_list: Vec<usize>,
    pub repeats: usize,
    pub master_seed: u64,
    pub eval: EvalSettings,
    /// Write wall-clock solve times; off gives byte-reproducible output.
    pub record_timing: bool,
}

/// Solves the scenario program for every `(N, repeat)` and evaluates each
/// controller on one shared set of noise traces.
///
/// Repeat `r` draws its scenarios from one seed for every `N`, so within a
/// repeat the scenario sets are nested.
pub fn experiment_sweep(
    sys: &MultNoiseSystem,
    cost: &CostModel,
    horizon: usize,
    cfg_base: &ScenarioConfig,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    if opts.n_list.is_empty() {
        return Err(Error::Parameter { name: "N_list", value: 0.0, range: "nonempty" });
    }
    let x0 = DVector::from_column_slice(&opts.eval.x0);
    let eval_seed = derive_seed(opts.master_seed, u64::MAX);
    let mut rows = Vec::with_capacity(opts.n_list.len() * opts.repeats);
    for &n in &opts.n_list {
        for repeat in 0..opts.repeats {
            let cfg = ScenarioConfig {
                scenarios: Some(n),
                seed: derive_seed(opts.master_seed, repeat as u64),
                validation_factor: 0,
                ..cfg_base.clone()
            };
            let start = Instant::now();
            let outcome = solve_p7(sys, cost, horizon, &cfg);
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            let solve_ms = if opts.record_timing { elapsed } else { 0.0 };
            let row = match outcome {
                Ok(res) => row_from_result(sys, cost, &x0, &res, n, repeat, eval_seed, opts, solve_ms)?,
                Err(e) => {
                    log::warn!("N={n} repeat={repeat}: {e}");
                    let status = match e {
                        Error::ScenarioInfeasible { .. } => QpStatus::Infeasible.to_string(),
                        _ => "error".to_string(),
                    };
                    SweepRow {
                        n,
                        repeat,
                        status,
                        alpha: f64::NAN,
                        mean_cost: f64::NAN,
                        q10: f64::NAN,
                        q50: f64::NAN,
                        q90: f64::NAN,
                        max_violation: f64::NAN,
                        solve_ms,
                    }
                }
            };
            log::info!("N={n} repeat={repeat} status={} mean_cost={:.6}", row.status, row.mean_cost);
            rows.push(row);
        }
    }
    Ok(SweepReport::from_rows(rows))
}

#[allow(clippy::too_many_arguments)]
fn row_from_result(
    sys: &MultNoiseSystem,
    cost: &CostModel,
    x0: &DVector<f64>,
    res: &SynthesisResult,
    n: usize,
    repeat: usize,
    eval_seed: u64,
    opts: &SweepOptions,
    solve_ms: f64,
) -> Result<SweepRow> {
    let ev = evaluate(sys, &res.controller, cost, x0, opts.eval.n_rollouts, eval_seed)?;
    Ok(SweepRow {
        n,
        repeat,
        status: res.qp_status.to_string(),
        alpha: res.alpha,
        mean_cost: ev.mean_cost,
        q10: ev.q10,
        q50: ev.q50,
        q90: ev.q90,
        max_violation: res.max_violation(),
        solve_ms,
    })
}

/// One-sided paired comparison between consecutive scenario counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub n_from: usize,
    pub n_to: usize,
    pub pairs: usize,
    /// Mean of `value(n_to) - value(n_from)`.
    pub mean_diff: f64,
    pub t_stat: f64,
    pub critical: f64,
    /// Significant increase at the chosen level.
    pub increase: bool,
    /// Significant decrease at the chosen level.
    pub decrease: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub level: f64,
    pub mean: Vec<PairTest>,
    pub dispersion: Vec<PairTest>,
    /// Band widths per scenario count, in sweep order.
    pub band_widths: Vec<(usize, f64)>,
}

impl TrendReport {
    /// No consecutive step shows a significant increase in mean cost.
    pub fn mean_nonincreasing(&self) -> bool {
        self.mean.iter().all(|p| !p.increase)
    }

    /// No consecutive step shows a significant increase in dispersion.
    pub fn dispersion_nonincreasing(&self) -> bool {
        self.dispersion.iter().all(|p| !p.increase)
    }
}

fn paired(n_from: usize, n_to: usize, a: &[(usize, f64)], b: &[(usize, f64)], level: f64) -> PairTest {
    let diffs: Vec<f64> =
        a.iter().filter_map(|&(r, va)| b.iter().find(|&&(rb, _)| rb == r).map(|&(_, vb)| vb - va)).collect();
    let k = diffs.len();
    let mean = if k > 0 { diffs.iter().sum::<f64>() / k as f64 } else { f64::NAN };
    let (t_stat, critical) = if k >= 2 {
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt();
        let crit =
            StudentsT::new(0.0, 1.0, (k - 1) as f64).map(|t| t.inverse_cdf(1.0 - level)).unwrap_or(f64::INFINITY);
        let t = if sd > 0.0 {
            mean / (sd / (k as f64).sqrt())
        } else if mean > 0.0 {
            f64::INFINITY
        } else if mean < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
        (t, crit)
    } else {
        (f64::NAN, f64::NAN)
    };
    PairTest {
        n_from,
        n_to,
        pairs: k,
        mean_diff: mean,
        t_stat,
        critical,
        increase: t_stat > critical,
        decrease: t_stat < -critical,
    }
}

/// Paired one-sided t-tests across repeats: mean cost, and the absolute
/// deviation of each repeat from that scenario count's median.
pub fn trend_test(report: &SweepReport, level: f64) -> TrendReport {
    let ns: Vec<usize> = report.aggregates.iter().map(|a| a.n).collect();
    let per_n = |n: usize| -> Vec<(usize, f64)> {
        report.rows.iter().filter(|r| r.n == n && r.is_ok()).map(|r| (r.repeat, r.mean_cost)).collect()
    };
    let deviations = |n: usize| -> Vec<(usize, f64)> {
        let vals = per_n(n);
        let med = quantile(&sorted(&vals.iter().map(|v| v.1).collect::<Vec<_>>()), 0.5);
        vals.into_iter().map(|(r, v)| (r, (v - med).abs())).collect()
    };
    let mut mean = Vec::new();
    let mut dispersion = Vec::new();
    for w in ns.windows(2) {
        mean.push(paired(w[0], w[1], &per_n(w[0]), &per_n(w[1]), level));
        dispersion.push(paired(w[0], w[1], &deviations(w[0]), &deviations(w[1]), level));
    }
    TrendReport {
        level,
        mean,
        dispersion,
        band_widths: report.aggregates.iter().map(|a| (a.n, a.band_width())).collect(),
    }
}

pub fn export_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn import_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    pub eps_tol: f64,
    pub eps_risk: f64,
    pub beta: f64,
    #[serde(rename = "N_list")]
    pub n_list: Vec<usize>,
    pub repeats: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        let base = ScenarioConfig::default();
        SweepSettings {
            eps_tol: base.eps_tol,
            eps_risk: base.eps_risk,
            beta: base.beta,
            n_list: vec![50, 200, 1000],
            repeats: 25,
        }
    }
}

/// Full experiment description as stored in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: MultNoiseSystem,
    pub cost: CostModel,
    pub horizon: usize,
    #[serde(default)]
    pub scenario: SweepSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ExperimentConfig {
    /// The scalar benchmark: `a = 0.8`, `b = 0.5`, `Q = R = 1`, truncated
    /// normal noise with standard deviation 0.5 on `A`, horizon 10.
    fn default() -> Self {
        ExperimentConfig {
            system: MultNoiseSystem::scalar_example(),
            cost: CostModel::new(dmatrix![1.0], dmatrix![1.0], WSpec::with_unit_noise(vec![1.0]))
                .expect("valid default cost"),
            horizon: 10,
            scenario: SweepSettings::default(),
            eval: EvalSettings::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            eps_tol: self.scenario.eps_tol,
            eps_risk: self.scenario.eps_risk,
            beta: self.scenario.beta,
            seed: self.seed,
            ..ScenarioConfig::default()
        }
    }

    pub fn sweep_options(&self, record_timing: bool) -> SweepOptions {
        SweepOptions {
            n_list: self.scenario.n_list.clone(),
            repeats: self.scenario.repeats,
            master_seed: self.seed,
            eval: self.eval.clone(),
            record_timing,
        }
    }

    pub fn run_sweep(&self, record_timing: bool) -> Result<SweepReport> {
        experiment_sweep(
            &self.system,
            &self.cost,
            self.horizon,
            &self.scenario_config(),
            &self.sweep_options(record_timing),
        )
    }
}

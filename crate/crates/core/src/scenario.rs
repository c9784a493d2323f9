//! Scenario program for multiplicative-noise synthesis.
//!
//! Each sampled noise realization `d^k` fixes `Omega_k = I + Rcal(d^k) Theta_ref`
//! where `Theta_ref` comes from a reference controller: the nominal optimum
//! under the same cost. The componentwise residual
//! `Psi_k(Phi) = Upsilon(Phi) Omega_k - I` is then affine in the response
//! entries, and the program
//!
//! ```text
//! minimize    || blkdiag(Qcal^1/2, Rcal^1/2) [Phi_x; Phi_u] W^1/2 ||_F^2
//! subject to  |Lambda_k(Phi)| <= 2 eps_tol / (n T)   entrywise, k = 1..N
//!             Phi_x^{t,0} = I
//! ```
//!
//! is a convex QP. The epigraph variable of the textbook form is eliminated;
//! its value is reported as `alpha`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blt::BltOperator;
use crate::error::{dim_err, Error, Result};
use crate::model::MultNoiseSystem;
use crate::qp::{qp_solve_lazy, QpProblem, QpSettings, QpStatus};
use crate::rng::derive_seed;
use crate::sls::{
    affine_constraint, controller_from_response, cost_hessian, nominal_sls_solve, CostModel, ResponseLayout,
    SystemResponse,
};
use crate::uncertainty::{
    build_theta, lambda_bound, lambda_coefficients, omega, psi_with_omega, LambdaMethod, ScenarioSample,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Residual tolerance; the entrywise bound is `2 eps_tol / (n T)`.
    pub eps_tol: f64,
    /// Risk level of the sample-size bound.
    pub eps_risk: f64,
    /// Confidence complement of the sample-size bound.
    pub beta: f64,
    /// Scenario count; `None` uses [`required_scenarios`].
    pub scenarios: Option<usize>,
    pub seed: u64,
    /// Fresh scenarios per drawn scenario for the a-posteriori check
    /// (0 disables it).
    pub validation_factor: usize,
    #[serde(skip)]
    pub qp: QpSettings,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            eps_tol: 6.0,
            eps_risk: 0.1,
            beta: 1e-6,
            scenarios: None,
            seed: 0,
            validation_factor: 10,
            qp: QpSettings::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_tol > 0.0 && self.eps_tol.is_finite()) {
            return Err(Error::Parameter { name: "eps_tol", value: self.eps_tol, range: "(0, inf)" });
        }
        if !(self.eps_risk > 0.0 && self.eps_risk < 1.0) {
            return Err(Error::Parameter { name: "eps_risk", value: self.eps_risk, range: "(0, 1)" });
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Parameter { name: "beta", value: self.beta, range: "(0, 1)" });
        }
        Ok(())
    }

    pub fn bound(&self, n: usize, horizon: usize) -> f64 {
        2.0 * self.eps_tol / (n * horizon) as f64
    }
}

/// `ceil((2 / (1 - eps)) (ln(1/beta) + n (m + n) T^2))`.
pub fn required_scenarios(beta: f64, eps_risk: f64, n: usize, m: usize, horizon: usize) -> Result<usize> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Parameter { name: "beta", value: beta, range: "(0, 1)" });
    }
    if !(eps_risk > 0.0 && eps_risk < 1.0) {
        return Err(Error::Parameter { name: "eps_risk", value: eps_risk, range: "(0, 1)" });
    }
    let dims = (n * (m + n) * horizon * horizon) as f64;
    let value = 2.0 / (1.0 - eps_risk) * ((1.0 / beta).ln() + dims);
    // Values within rounding of an integer count as that integer.
    Ok((value - 1e-9 * value.max(1.0)).ceil() as usize)
}

/// `n` independent samples; sample `k` depends only on `(seed, k)`, so
/// smaller sets are prefixes of larger ones.
pub fn draw_scenarios(sys: &MultNoiseSystem, horizon: usize, n: usize, seed: u64) -> Result<Vec<ScenarioSample>> {
    (0..n).map(|k| ScenarioSample::draw(sys, horizon, derive_seed(seed, k as u64))).collect()
}

/// `Theta` of the nominal optimum, which fixes every `Omega_k`.
pub fn reference_theta(sys: &MultNoiseSystem, cost: &CostModel, horizon: usize) -> Result<DMatrix<f64>> {
    let nominal = nominal_sls_solve(sys, cost, horizon)?;
    let k = controller_from_response(&nominal.response)?;
    Ok(build_theta(&k, sys, horizon)?.theta)
}

/// The assembled program and how its variables map back to a response.
#[derive(Debug, Clone, PartialEq)]
pub struct P7Problem {
    pub qp: QpProblem,
    pub layout: ResponseLayout,
    /// Response coordinate of each decision variable.
    pub free: Vec<usize>,
    /// Full response vector with the fixed diagonal entries set and zeros
    /// elsewhere.
    pub fixed: DVector<f64>,
    /// Objective constant from the fixed entries.
    pub constant: f64,
    pub bound: f64,
    pub rows_per_scenario: usize,
}

impl P7Problem {
    pub fn response(&self, z: &DVector<f64>) -> Result<SystemResponse> {
        let mut full = self.fixed.clone();
        for (i, &c) in self.free.iter().enumerate() {
            full[c] = z[i];
        }
        self.layout.unflatten(full.as_slice())
    }

    /// Value of the original objective at `z`.
    pub fn alpha(&self, z: &DVector<f64>) -> f64 {
        self.qp.objective(z) + self.constant
    }
}

pub fn assemble_p7(
    sys: &MultNoiseSystem,
    cost: &CostModel,
    horizon: usize,
    cfg: &ScenarioConfig,
    samples: &[ScenarioSample],
) -> Result<P7Problem> {
    let theta = reference_theta(sys, cost, horizon)?;
    assemble_p7_with_theta(sys, cost, horizon, cfg, samples, &theta)
}

pub fn assemble_p7_with_theta(
    sys: &MultNoiseSystem,
    cost: &CostModel,
    horizon: usize,
    cfg: &ScenarioConfig,
    samples: &[ScenarioSample],
    theta: &DMatrix<f64>,
) -> Result<P7Problem> {
    cfg.validate()?;
    let (n, m) = (sys.n(), sys.m());
    if horizon == 0 {
        return dim_err("horizon must be positive");
    }
    let layout = ResponseLayout::new(horizon, n, m);
    let mut is_fixed = vec![false; layout.len()];
    let mut fixed = DVector::zeros(layout.len());
    for t in 0..horizon {
        for r in 0..n {
            for c in 0..n {
                let i = layout.x_index(t, t, r, c);
                is_fixed[i] = true;
                fixed[i] = if r == c { 1.0 } else { 0.0 };
            }
        }
    }
    let free: Vec<usize> = (0..layout.len()).filter(|&i| !is_fixed[i]).collect();
    let mut col_of = vec![usize::MAX; layout.len()];
    for (j, &c) in free.iter().enumerate() {
        col_of[c] = j;
    }
    let nf = free.len();

    let h = cost_hessian(cost, n, m, horizon)?;
    let hf = DMatrix::from_fn(nf, nf, |i, j| 2.0 * h[(free[i], free[j])]);
    let h_fixed = &h * &fixed;
    let q = DVector::from_fn(nf, |i, _| 2.0 * h_fixed[free[i]]);
    let constant = fixed.dot(&h_fixed);
    let mut qp = QpProblem::new(hf, q);

    let bound = cfg.bound(n, horizon);
    let rows_per_scenario = horizon * horizon.saturating_sub(1) / 2 * n * n;
    if samples.is_empty() {
        log::warn!("no scenarios supplied; solving the nominal problem with the diagonal fixed");
        let (a, b) = affine_constraint(sys, horizon);
        let a_fixed = &a * &fixed;
        let a_eq = DMatrix::from_fn(a.nrows(), nf, |i, j| a[(i, free[j])]);
        let b_eq = b - a_fixed;
        // Rows for the fixed diagonal are identically satisfied; drop them.
        let keep: Vec<usize> = (0..a_eq.nrows()).filter(|&i| a_eq.row(i).amax() > 0.0).collect();
        let a_eq = DMatrix::from_fn(keep.len(), nf, |i, j| a_eq[(keep[i], j)]);
        let b_eq = DVector::from_fn(keep.len(), |i, _| b_eq[keep[i]]);
        qp = qp.with_equalities(a_eq, b_eq);
    } else {
        let total = rows_per_scenario * samples.len();
        let mut g = DMatrix::zeros(total, nf);
        let mut lo = DVector::zeros(total);
        let mut hi = DVector::zeros(total);
        let mut row = 0;
        for sample in samples {
            let om = omega(sample, theta)?;
            for lr in lambda_coefficients(&om, sys, horizon)? {
                let mut offset = 0.0;
                for &(coord, coef) in &lr.terms {
                    if is_fixed[coord] {
                        offset += coef * fixed[coord];
                    } else {
                        g[(row, col_of[coord])] += coef;
                    }
                }
                lo[row] = -bound - offset;
                hi[row] = bound - offset;
                row += 1;
            }
        }
        qp = qp.with_inequalities(g, lo, hi);
    }
    Ok(P7Problem { qp, layout, free, fixed, constant, bound, rows_per_scenario })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub response: SystemResponse,
    pub controller: BltOperator,
    /// Optimal objective value.
    pub alpha: f64,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub n_scenarios: usize,
    /// Sample-size bound for the configured risk and confidence.
    pub n_required: usize,
    /// Set when fewer scenarios than the bound were used.
    pub n_override: bool,
    pub bound: f64,
    /// Per drawn scenario, `max(0, max |Lambda| - bound)`.
    pub scenario_max_violation: Vec<f64>,
    /// Fraction of fresh scenarios with any entry above the bound.
    pub empirical_violation_rate: Option<f64>,
    pub validation_scenarios: usize,
    /// `E ||Dbar||_F^2` at the synthesized controller.
    pub lambda: f64,
    /// `1 - lambda / eps_tol^2`.
    pub lambda_level: f64,
    pub solve_ms: f64,
}

impl SynthesisResult {
    pub fn max_violation(&self) -> f64 {
        self.scenario_max_violation.iter().copied().fold(0.0, f64::max)
    }
}

/// Largest `|Lambda|` entry for each scenario, minus the bound, clipped at 0.
pub fn scenario_violations(
    resp: &SystemResponse,
    samples: &[ScenarioSample],
    theta: &DMatrix<f64>,
    sys: &MultNoiseSystem,
    horizon: usize,
    bound: f64,
) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let dec = psi_with_omega(resp, &omega(s, theta)?, sys, horizon)?;
            let worst = dec.lambda.values().map(|l| l.amax()).fold(0.0, f64::max);
            Ok((worst - bound).max(0.0))
        })
        .collect()
}

/// Rows added per constraint-generation round.
const WORKING_SET_BATCH: usize = 100;

fn solve_with(
    sys: &MultNoiseSystem,
    cost: &CostModel,
    horizon: usize,
    cfg: &ScenarioConfig,
    samples: &[ScenarioSample],
    theta: &DMatrix<f64>,
) -> Result<(P7Problem, crate::qp::QpSolution)> {
    let problem = assemble_p7_with_theta(sys, cost, horizon, cfg, samples, theta)?;
    let sol = qp_solve_lazy(&problem.qp, &cfg.qp, WORKING_SET_BATCH)?;
    Ok((problem, sol))
}

/// Smallest feasible `eps_tol` found by doubling then bisection.
fn restore_feasibility(
    sys: &MultNoiseSystem,
    cost: &CostModel,
    horizon: usize,
    cfg: &ScenarioConfig,
    samples: &[ScenarioSample],
    theta: &DMatrix<f64>,
) -> Result<Option<f64>> {
    let feasible = |eps: f64| -> Result<bool> {
        let mut c = cfg.clone();
        c.eps_tol = eps;
        Ok(solve_with(sys, cost, horizon, &c, samples, theta)?.1.status != QpStatus::Infeasible)
    };
    let mut lo = cfg.eps_tol;
    let mut hi = cfg.eps_tol * 2.0;
    let mut found = false;
    for _ in 0..40 {
        if feasible(hi)? {
            found = true;
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    if !found {
        return Ok(None);
    }
    for _ in 0..20 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

pub fn solve_p7(
    sys: &MultNoiseSystem,
    cost: &CostModel,
    horizon: usize,
    cfg: &ScenarioConfig,
) -> Result<SynthesisResult> {
    cfg.validate()?;
    let (n, m) = (sys.n(), sys.m());
    let n_required = required_scenarios(cfg.beta, cfg.eps_risk, n, m, horizon)?;
    let n_scenarios = cfg.scenarios.unwrap_or(n_required);
    let samples = draw_scenarios(sys, horizon, n_scenarios, cfg.seed)?;
    let theta = reference_theta(sys, cost, horizon)?;

    let start = Instant::now();
    let (problem, sol) = solve_with(sys, cost, horizon, cfg, &samples, &theta)?;
    let solve_ms = start.elapsed().as_secs_f64() * 1e3;
    if sol.status == QpStatus::Infeasible {
        let restored = restore_feasibility(sys, cost, horizon, cfg, &samples, &theta)?;
        return Err(Error::ScenarioInfeasible { requested: cfg.eps_tol, restored });
    }
    if sol.status == QpStatus::MaxIters {
        log::warn!("scenario QP stopped at the iteration limit");
    }

    let response = problem.response(&sol.z)?;
    let controller = controller_from_response(&response)?;
    let bound = problem.bound;
    let scenario_max_violation = scenario_violations(&response, &samples, &theta, sys, horizon, bound)?;

    let validation_scenarios = cfg.validation_factor * n_scenarios;
    let empirical_violation_rate = if validation_scenarios > 0 {
        let fresh = draw_scenarios(sys, horizon, validation_scenarios, derive_seed(cfg.seed, u64::MAX))?;
        let v = scenario_violations(&response, &fresh, &theta, sys, horizon, bound)?;
        let rate = v.iter().filter(|&&x| x > 1e-9).count() as f64 / v.len() as f64;
        log::info!("a-posteriori violation rate {rate:.4} over {validation_scenarios} fresh scenarios");
        Some(rate)
    } else {
        None
    };

    let th = build_theta(&controller, sys, horizon)?;
    let lambda = lambda_bound(&th.theta, &sys.sigma, n, LambdaMethod::ClosedForm, 0)?;
    Ok(SynthesisResult {
        alpha: problem.alpha(&sol.z),
        qp_status: sol.status,
        qp_iterations: sol.iterations,
        n_scenarios,
        n_required,
        n_override: cfg.scenarios.is_some_and(|s| s < n_required),
        bound,
        scenario_max_violation,
        empirical_violation_rate,
        validation_scenarios,
        lambda,
        lambda_level: 1.0 - lambda / cfg.eps_tol.powi(2),
        solve_ms,
        response,
        controller,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DeltaDist;
    use crate::sls::WSpec;
    use nalgebra::dmatrix;

    #[test]
    fn sample_bound_examples() {
        let e = (-1.0f64).exp();
        assert_eq!(required_scenarios(e, 0.5, 1, 1, 1).unwrap(), 12);
        assert_eq!(required_scenarios(1e-6, 0.1, 1, 1, 10).unwrap(), 476);
        assert!(required_scenarios(0.0, 0.1, 1, 1, 1).is_err());
        assert!(required_scenarios(0.1, 1.0, 1, 1, 1).is_err());
    }

    #[test]
    fn scenario_sets_are_nested() {
        let sys = MultNoiseSystem::scalar_example();
        let small = draw_scenarios(&sys, 5, 3, 11).unwrap();
        let large = draw_scenarios(&sys, 5, 6, 11).unwrap();
        assert_eq!(&large[..3], &small[..]);
        assert!(draw_scenarios(&sys, 5, 0, 11).unwrap().is_empty());
    }

    #[test]
    fn constraint_count() {
        let sys = MultNoiseSystem::scalar_example();
        let cost = CostModel::new(dmatrix![1.0], dmatrix![1.0], WSpec::with_unit_noise(vec![1.0])).unwrap();
        let samples = draw_scenarios(&sys, 6, 4, 1).unwrap();
        let p = assemble_p7(&sys, &cost, 6, &ScenarioConfig::default(), &samples).unwrap();
        assert_eq!(p.qp.g.nrows(), 4 * 15);
        assert_eq!(p.rows_per_scenario, 15);
    }

    #[test]
    fn zero_scenarios_reduce_to_nominal() {
        let sys = MultNoiseSystem::nominal(dmatrix![0.8], dmatrix![0.5]).unwrap();
        let cost = CostModel::new(dmatrix![1.0], dmatrix![1.0], WSpec::with_unit_noise(vec![1.0])).unwrap();
        let cfg = ScenarioConfig { scenarios: Some(0), validation_factor: 0, ..Default::default() };
        let res = solve_p7(&sys, &cost, 5, &cfg).unwrap();
        let nominal = nominal_sls_solve(&sys, &cost, 5).unwrap();
        assert_eq!(res.qp_status, QpStatus::Optimal);
        assert!((res.alpha - nominal.objective).abs() < 1e-6);
        assert!((res.response.phi_u.to_dense() - nominal.response.phi_u.to_dense()).amax() < 1e-6);
    }

    #[test]
    fn infeasible_tolerance_reports_restoration() {
        let sys = MultNoiseSystem::new(
            dmatrix![0.8],
            dmatrix![0.5],
            vec![dmatrix![1.0]],
            vec![dmatrix![0.0]],
            vec![0.5],
            DeltaDist::truncated_default(),
            vec![0.0],
        )
        .unwrap();
        let cost = CostModel::new(dmatrix![1.0], dmatrix![1.0], WSpec::with_unit_noise(vec![1.0])).unwrap();
        let cfg = ScenarioConfig { eps_tol: 0.05, scenarios: Some(20), validation_factor: 0, ..Default::default() };
        match solve_p7(&sys, &cost, 3, &cfg) {
            Err(Error::ScenarioInfeasible { requested, restored: Some(r) }) => {
                assert_eq!(requested, 0.05);
                assert!(r > 0.05);
                let ok = ScenarioConfig { eps_tol: r * 1.01, ..cfg };
                assert_eq!(solve_p7(&sys, &cost, 3, &ok).unwrap().qp_status, QpStatus::Optimal);
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }
}

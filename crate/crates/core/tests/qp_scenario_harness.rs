use nalgebra::{dmatrix, DMatrix, DVector};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slsmn::harness::{evaluate, experiment_sweep, EvalSettings, ExperimentConfig, SweepOptions, SweepReport};
use slsmn::model::{DeltaDist, MultNoiseSystem};
use slsmn::qp::{qp_least_squares, qp_solve, QpProblem, QpSettings, QpStatus};
use slsmn::scenario::{solve_p7, ScenarioConfig};
use slsmn::sls::{riccati_lqr, CostModel, WSpec};
use slsmn::BltOperator;

fn uniform(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

#[test]
fn equality_qp_matches_kkt_solve() {
    let mut r = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..30 {
        let dim = r.random_range(2..=20);
        let me = r.random_range(0..dim.min(5));
        let m = uniform(&mut r, dim, dim);
        let p = &m * m.transpose() + DMatrix::identity(dim, dim) * 0.2;
        let q = uniform(&mut r, dim, 1).column(0).into_owned();
        let a = uniform(&mut r, me, dim);
        let b = uniform(&mut r, me, 1).column(0).into_owned();
        let mut kkt = DMatrix::zeros(dim + me, dim + me);
        kkt.view_mut((0, 0), (dim, dim)).copy_from(&p);
        kkt.view_mut((dim, 0), (me, dim)).copy_from(&a);
        kkt.view_mut((0, dim), (dim, me)).copy_from(&a.transpose());
        let mut rhs = DVector::zeros(dim + me);
        rhs.rows_mut(0, dim).copy_from(&(-&q));
        rhs.rows_mut(dim, me).copy_from(&b);
        let z_star = kkt.lu().solve(&rhs).unwrap().rows(0, dim).into_owned();
        let problem = QpProblem::new(p, q).with_equalities(a, b);
        let sol = qp_solve(&problem, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let f_star = problem.objective(&z_star);
        assert!((sol.objective - f_star).abs() <= 1e-6 * f_star.abs().max(1.0));
        assert!((sol.z - z_star).amax() <= 1e-6);
    }
}

#[test]
fn least_squares_agrees_with_qp() {
    let mut r = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..20 {
        let dim = r.random_range(2..=12);
        let me = r.random_range(0..dim);
        let c = uniform(&mut r, dim + 3, dim);
        let d = uniform(&mut r, dim + 3, 1).column(0).into_owned();
        let a = uniform(&mut r, me, dim);
        let b = uniform(&mut r, me, 1).column(0).into_owned();
        let ls = qp_least_squares(&a, &b, &c, &d).unwrap();
        // ||Cz - d||^2 = z'C'Cz - 2 d'Cz + d'd
        let problem = QpProblem::new(c.transpose() * &c * 2.0, -(c.transpose() * &d) * 2.0).with_equalities(a, b);
        let sol = qp_solve(&problem, &QpSettings::default()).unwrap();
        let qp_value = sol.objective + d.norm_squared();
        assert!((qp_value - ls.objective).abs() <= 1e-6 * ls.objective.max(1.0));
        assert!(!ls.rank_deficient);
    }
}

fn unit_cost() -> CostModel {
    CostModel::new(dmatrix![1.0], dmatrix![1.0], WSpec::with_unit_noise(vec![1.0])).unwrap()
}

#[test]
fn noise_free_scenario_program_recovers_riccati() {
    let sys = MultNoiseSystem::new(
        dmatrix![0.8],
        dmatrix![0.5],
        vec![dmatrix![1.0]],
        vec![dmatrix![0.0]],
        vec![0.0],
        DeltaDist::Gaussian,
        vec![0.0],
    )
    .unwrap();
    // With no noise every Lambda is an affine residual block; a tiny tolerance
    // makes the program the nominal one.
    let cfg = ScenarioConfig { eps_tol: 1e-9, scenarios: Some(3), validation_factor: 0, ..Default::default() };
    let res = solve_p7(&sys, &unit_cost(), 8, &cfg).unwrap();
    assert_eq!(res.qp_status, QpStatus::Optimal);
    let ric = riccati_lqr(&sys.a0, &sys.b0, &dmatrix![1.0], &dmatrix![1.0], 8).unwrap();
    for t in 0..8 {
        assert!((res.controller.block(t, 0) - &ric.gains[t]).amax() < 1e-4, "step {t}");
    }
}

#[test]
fn objective_grows_with_nested_scenarios() {
    let sys = MultNoiseSystem::scalar_example();
    let cfg = |n| ScenarioConfig { scenarios: Some(n), seed: 77, validation_factor: 0, ..Default::default() };
    let mut last = f64::NEG_INFINITY;
    for n in [5, 20, 80, 300] {
        let res = solve_p7(&sys, &unit_cost(), 8, &cfg(n)).unwrap();
        assert_eq!(res.qp_status, QpStatus::Optimal);
        assert!(res.alpha >= last - 1e-6 * last.abs().max(1.0), "N={n}: {} < {last}", res.alpha);
        assert!(res.max_violation() <= 1e-6);
        last = res.alpha;
    }
}

#[test]
fn scenario_solve_is_deterministic() {
    let sys = MultNoiseSystem::scalar_example();
    let cfg = ScenarioConfig { scenarios: Some(60), seed: 5, validation_factor: 2, ..Default::default() };
    let a = solve_p7(&sys, &unit_cost(), 6, &cfg).unwrap();
    let b = solve_p7(&sys, &unit_cost(), 6, &cfg).unwrap();
    assert_eq!(a.response, b.response);
    assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
    assert_eq!(a.empirical_violation_rate, b.empirical_violation_rate);
    assert!(a.n_override);
    assert_eq!(a.n_required, 191);
    assert!((a.lambda_level - (1.0 - a.lambda / 36.0)).abs() < 1e-15);
}

#[test]
fn open_loop_cost_matches_moment_recursion() {
    let sys = MultNoiseSystem::scalar_example();
    let k = BltOperator::zeros(10, 1, 1);
    let ev = evaluate(&sys, &k, &unit_cost(), &DVector::from_element(1, 1.0), 20_000, 3).unwrap();
    // E x_{t+1}^2 = (a^2 + sigma^2) E x_t^2 with x_0 = 1
    let rho: f64 = 0.64 + 0.25;
    let expected: f64 = (0..10).map(|t| rho.powi(t)).sum();
    assert!(
        (ev.mean_cost - expected).abs() <= 3.0 * ev.std_error,
        "{} vs {expected} (se {})",
        ev.mean_cost,
        ev.std_error
    );
    assert!(ev.q10 <= ev.q50 && ev.q50 <= ev.q90);
    assert!(ev.min_cost <= ev.mean_cost && ev.mean_cost <= ev.max_cost);
}

#[test]
fn doubling_rollouts_shrinks_standard_error() {
    let sys = MultNoiseSystem::scalar_example();
    let k = BltOperator::block_diagonal(&vec![dmatrix![-0.6]; 10]).unwrap();
    let x0 = DVector::from_element(1, 1.0);
    let a = evaluate(&sys, &k, &unit_cost(), &x0, 20_000, 9).unwrap();
    let b = evaluate(&sys, &k, &unit_cost(), &x0, 40_000, 9).unwrap();
    let ratio = b.std_error / a.std_error;
    assert!((ratio - 0.5f64.sqrt()).abs() < 0.05, "ratio {ratio}");
}

fn small_sweep(master_seed: u64, n_list: Vec<usize>, repeats: usize) -> SweepReport {
    let cfg = ExperimentConfig::default();
    let opts = SweepOptions {
        n_list,
        repeats,
        master_seed,
        eval: EvalSettings { n_rollouts: 200, x0: vec![1.0] },
        record_timing: false,
    };
    experiment_sweep(&cfg.system, &cfg.cost, 6, &cfg.scenario_config(), &opts).unwrap()
}

#[test]
fn single_cell_sweep() {
    let report = small_sweep(1, vec![30], 1);
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.aggregates.len(), 1);
    assert_eq!(report.aggregates[0].successful, 1);
    assert_eq!(report.aggregates[0].mean_cost, report.rows[0].mean_cost);
}

#[test]
fn sweep_csv_is_reproducible_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let report = small_sweep(42, vec![20, 40], 2);
    report.export_csv(&p1).unwrap();
    small_sweep(42, vec![20, 40], 2).export_csv(&p2).unwrap();
    let bytes = std::fs::read(&p1).unwrap();
    assert_eq!(bytes, std::fs::read(&p2).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 10));
    assert!(text.contains('.'));
    let back = SweepReport::import_csv(&p1).unwrap();
    assert_eq!(back, report);
    assert_ne!(small_sweep(43, vec![20, 40], 2).rows, report.rows);
}

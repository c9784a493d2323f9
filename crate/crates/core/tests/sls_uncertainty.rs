use nalgebra::{dmatrix, DMatrix};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slsmn::blt::block_downshift;
use slsmn::model::{stacked_nominal, DeltaDist, MultNoiseSystem};
use slsmn::scenario::draw_scenarios;
use slsmn::sls::{affine_residual, controller_from_response, response_from_controller, ResponseLayout, SystemResponse};
use slsmn::uncertainty::{lambda_coefficients, perturbed_residual, psi_and_lambda, upsilon, ScenarioSample};
use slsmn::BltOperator;

fn uniform(r: &mut ChaCha8Rng, rows: usize, cols: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(-s..s))
}

fn causal(r: &mut ChaCha8Rng, t: usize, rows: usize, cols: usize, s: f64) -> BltOperator {
    let blocks: Vec<_> =
        (0..t).flat_map(|i| (0..=i).map(move |j| (i, j))).map(|ij| (ij, uniform(r, rows, cols, s))).collect();
    BltOperator::from_blocks(t, rows, cols, blocks).unwrap()
}

fn system(r: &mut ChaCha8Rng, n: usize, m: usize, nd: usize) -> MultNoiseSystem {
    MultNoiseSystem::new(
        uniform(r, n, n, 0.5),
        uniform(r, n, m, 1.0),
        (0..nd).map(|_| uniform(r, n, n, 0.5)).collect(),
        (0..nd).map(|_| uniform(r, n, m, 0.5)).collect(),
        vec![0.3; nd],
        DeltaDist::Gaussian,
        vec![0.0; n],
    )
    .unwrap()
}

fn random_response(r: &mut ChaCha8Rng, t: usize, n: usize, m: usize) -> SystemResponse {
    let mut phi_x = causal(r, t, n, n, 0.4);
    for i in 0..t {
        *phi_x.block_mut(i, 0) += DMatrix::identity(n, n);
    }
    SystemResponse { phi_x, phi_u: causal(r, t, m, n, 0.4) }
}

#[test]
fn upsilon_matches_dense_expression() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let (n, m, t) = (r.random_range(1..=3), r.random_range(1..=2), r.random_range(1..=6));
        let sys = system(&mut r, n, m, 1);
        let resp = random_response(&mut r, t, n, m);
        let z = block_downshift(t, n).to_dense();
        let mut a = DMatrix::zeros(n * t, n * t);
        let mut b = DMatrix::zeros(n * t, m * t);
        for s in 0..t {
            a.view_mut((s * n, s * n), (n, n)).copy_from(&sys.a0);
            b.view_mut((s * n, s * m), (n, m)).copy_from(&sys.b0);
        }
        let want = (DMatrix::identity(n * t, n * t) - &z * a) * resp.phi_x.to_dense() - z * b * resp.phi_u.to_dense();
        assert!((upsilon(&resp, &sys, t).unwrap() - want).amax() < 1e-13);
    }
}

#[test]
fn upsilon_of_open_loop_zero_system_is_identity() {
    let sys = MultNoiseSystem::nominal(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1)).unwrap();
    let resp = SystemResponse { phi_x: BltOperator::identity(4, 2), phi_u: BltOperator::zeros(4, 1, 2) };
    assert_eq!(upsilon(&resp, &sys, 4).unwrap(), DMatrix::identity(8, 8));
    assert_eq!(affine_residual(&resp, &stacked_nominal(&sys, 4).unwrap()).unwrap(), DMatrix::zeros(8, 8));
}

#[test]
fn zero_noise_on_exact_response_gives_zero_psi() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let sys = system(&mut r, 2, 1, 2);
    let k = causal(&mut r, 5, 1, 2, 0.5);
    let resp = response_from_controller(&k, &stacked_nominal(&sys, 5).unwrap()).unwrap();
    let dec = psi_and_lambda(&resp, &ScenarioSample::zeros(5, 2), &sys, 5).unwrap();
    assert!(dec.psi.amax() < 1e-14);
    assert_eq!(dec.lambda.len(), 10);
}

#[test]
fn zero_noise_residual_is_affine_residual() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let sys = system(&mut r, 2, 2, 1);
    let resp = random_response(&mut r, 4, 2, 2);
    let nom = stacked_nominal(&sys, 4).unwrap();
    let a = perturbed_residual(&resp, &ScenarioSample::zeros(4, 1), &sys, 4).unwrap();
    let b = affine_residual(&resp, &nom).unwrap();
    assert!((a - b).amax() < 1e-12);
}

#[test]
fn perturbed_response_leaves_a_residual() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let sys = system(&mut r, 1, 1, 1);
    let k = causal(&mut r, 4, 1, 1, 0.5);
    let mut resp = response_from_controller(&k, &stacked_nominal(&sys, 4).unwrap()).unwrap();
    let sample = ScenarioSample::draw(&sys, 4, 8).unwrap();
    assert!(perturbed_residual(&resp, &sample, &sys, 4).unwrap().norm() < 1e-12);
    resp.phi_x.block_mut(2, 1)[(0, 0)] += 0.3;
    assert!(perturbed_residual(&resp, &sample, &sys, 4).unwrap().norm() > 1e-3);
}

#[test]
fn zero_sample_rows_are_affine_residual_blocks() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let (n, m, t) = (2, 1, 4);
    let sys = system(&mut r, n, m, 1);
    let resp = random_response(&mut r, t, n, m);
    let v = ResponseLayout::new(t, n, m).flatten(&resp);
    let res = affine_residual(&resp, &stacked_nominal(&sys, t).unwrap()).unwrap();
    let rows = lambda_coefficients(&DMatrix::identity(n * t, n * t), &sys, t).unwrap();
    assert_eq!(rows.len(), t * (t - 1) / 2 * n * n);
    for row in rows {
        let val: f64 = row.terms.iter().map(|&(c, w)| w * v[c]).sum();
        let (bk, bm) = row.block;
        let (er, ec) = row.entry;
        assert!((val - res[(bk * n + er, bm * n + ec)]).abs() < 1e-13);
    }
}

#[test]
fn deadbeat_response_recovers_gain() {
    let sys = MultNoiseSystem::nominal(dmatrix![0.8], dmatrix![0.5]).unwrap();
    let k = BltOperator::block_diagonal(&vec![dmatrix![-1.6]; 3]).unwrap();
    let resp = response_from_controller(&k, &stacked_nominal(&sys, 3).unwrap()).unwrap();
    assert_eq!(resp.phi_x.to_dense(), DMatrix::identity(3, 3));
    let back = controller_from_response(&resp).unwrap();
    assert!((back.to_dense() - k.to_dense()).amax() < 1e-15);
}

#[test]
fn pooled_scenario_variance() {
    let sys = MultNoiseSystem::scalar_example();
    let samples = draw_scenarios(&sys, 10, 20_000, 4).unwrap();
    let all: Vec<f64> = samples.iter().flat_map(|s| s.deltas.iter().copied().collect::<Vec<_>>()).collect();
    assert!(all.len() >= 100_000);
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (all.len() - 1) as f64;
    assert!((var - 0.25).abs() <= 0.02 * 0.25, "variance {var}");
    let again = draw_scenarios(&sys, 10, 5, 4).unwrap();
    assert_eq!(&samples[..5], &again[..]);
}

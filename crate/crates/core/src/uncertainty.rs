//! Operators describing how multiplicative noise distorts a nominal
//! closed-loop response.
//!
//! For a causal controller `K` the realized response is
//! `Phi = Phibar (I + Dbar)^{-1}` where `Dbar = Rcal Theta` is strictly block
//! lower triangular, `Rcal` carries the noise samples and `Theta` depends only
//! on `K` and the system. The same objects give the componentwise residual
//! `Psi = Upsilon(Phi) Omega - I` used by the scenario program, the Chernoff
//! ellipsoids for one-step predictions, and the variance `lambda`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::blt::BltOperator;
use crate::error::{dim_err, Error, Result};
use crate::linalg::repeat_diag;
use crate::model::{draw_deltas, stacked_nominal, MultNoiseSystem};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sls::{controller_from_response, ResponseLayout, SystemResponse};

/// One draw of every multiplicative noise coordinate over a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSample {
    /// `T x n_delta`; entry `(t, i)` is `d_t^i`.
    pub deltas: DMatrix<f64>,
}

impl ScenarioSample {
    pub fn new(deltas: DMatrix<f64>) -> Self {
        ScenarioSample { deltas }
    }

    pub fn zeros(horizon: usize, n_delta: usize) -> Self {
        ScenarioSample { deltas: DMatrix::zeros(horizon, n_delta) }
    }

    /// Same multiplicative draw as [`crate::model::sample_noise`] with this seed.
    pub fn draw(sys: &MultNoiseSystem, horizon: usize, seed: u64) -> Result<Self> {
        let sampler = sys.delta_dist.sampler()?;
        let mut rng = rng_from_seed(seed);
        Ok(ScenarioSample { deltas: draw_deltas(sys, &sampler, horizon, &mut rng) })
    }

    pub fn horizon(&self) -> usize {
        self.deltas.nrows()
    }

    pub fn n_delta(&self) -> usize {
        self.deltas.ncols()
    }

    /// `Rcal` (`nT x n n_delta T`): block `(t+1, t)` is
    /// `[d_t^1 I ... d_t^k I]`, everything else zero.
    pub fn rcal(&self, n: usize) -> DMatrix<f64> {
        let (horizon, k) = (self.horizon(), self.n_delta());
        let mut r = DMatrix::zeros(n * horizon, n * k * horizon);
        for t in 0..horizon.saturating_sub(1) {
            for i in 0..k {
                let d = self.deltas[(t, i)];
                for j in 0..n {
                    r[((t + 1) * n + j, t * n * k + i * n + j)] = d;
                }
            }
        }
        r
    }

    /// Block-diagonal `diag(d_0, ..., d_{T-2}, 0)` with `d_t = [d_t^1 I ... d_t^k I]`.
    pub fn delta_frown(&self, n: usize) -> DMatrix<f64> {
        let (horizon, k) = (self.horizon(), self.n_delta());
        let mut d = DMatrix::zeros(n * horizon, n * k * horizon);
        for t in 0..horizon.saturating_sub(1) {
            for i in 0..k {
                for j in 0..n {
                    d[(t * n + j, t * n * k + i * n + j)] = self.deltas[(t, i)];
                }
            }
        }
        d
    }

    fn check(&self, sys: &MultNoiseSystem, horizon: usize) -> Result<()> {
        if self.deltas.shape() != (horizon, sys.n_delta()) {
            return dim_err(format!("sample is {:?}, expected ({horizon}, {})", self.deltas.shape(), sys.n_delta()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    /// `-(I (x) Acal_dirs) - (I (x) Bcal_dirs) K`.
    pub theta1: DMatrix<f64>,
    /// `(I - Z (A0cal + B0cal K))^{-1}`.
    pub theta2: DMatrix<f64>,
    pub theta: DMatrix<f64>,
}

fn check_k(k: &BltOperator, sys: &MultNoiseSystem, horizon: usize) -> Result<()> {
    if k.horizon() != horizon || k.block_rows() != sys.m() || k.block_cols() != sys.n() {
        return dim_err("controller does not match the system dimensions or horizon");
    }
    Ok(())
}

pub fn build_theta(k: &BltOperator, sys: &MultNoiseSystem, horizon: usize) -> Result<Theta> {
    check_k(k, sys, horizon)?;
    let nom = stacked_nominal(sys, horizon)?;
    let kd = k.to_dense();
    let theta1 = -repeat_diag(&sys.stacked_a(), horizon) - repeat_diag(&sys.stacked_b(), horizon) * kd;
    let theta2 = nom.closed_loop(k)?.inverse()?.to_dense();
    let theta = &theta1 * &theta2;
    Ok(Theta { theta1, theta2, theta })
}

/// `Dbar = Rcal Theta`.
pub fn delta_bar(sample: &ScenarioSample, theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cols = sample.n_delta() * sample.horizon();
    if cols == 0 || !theta.nrows().is_multiple_of(cols) || theta.ncols() * sample.n_delta() != theta.nrows() {
        return dim_err("Theta does not match the sample");
    }
    let n = theta.nrows() / cols;
    Ok(sample.rcal(n) * theta)
}

/// `Dbar` built from its defining product
/// `-Z diag(d_0, ..., d_{T-2}, 0) ((I (x) A) + (I (x) B) K) Theta2`.
pub fn delta_bar_direct(
    sample: &ScenarioSample,
    k: &BltOperator,
    sys: &MultNoiseSystem,
    horizon: usize,
) -> Result<DMatrix<f64>> {
    sample.check(sys, horizon)?;
    let th = build_theta(k, sys, horizon)?;
    let n = sys.n();
    let z = crate::blt::block_downshift(horizon, n).to_dense();
    let dirs = repeat_diag(&sys.stacked_a(), horizon) + repeat_diag(&sys.stacked_b(), horizon) * k.to_dense();
    Ok(-(z * sample.delta_frown(n) * dirs * th.theta2))
}

/// `Omega = I + Rcal Theta`.
pub fn omega(sample: &ScenarioSample, theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut o = delta_bar(sample, theta)?;
    for i in 0..o.nrows() {
        o[(i, i)] += 1.0;
    }
    Ok(o)
}

fn check_response(resp: &SystemResponse, sys: &MultNoiseSystem, horizon: usize) -> Result<()> {
    if resp.horizon() != horizon || resp.n() != sys.n() || resp.m() != sys.m() || resp.phi_x.block_cols() != sys.n() {
        return dim_err("response does not match the system dimensions or horizon");
    }
    Ok(())
}

/// `(I - Z A0cal) Phi_x - Z B0cal Phi_u`, assembled block by block: the
/// diagonal blocks are `Phi_x^{t,0}` and block `(k, m)` below the diagonal is
/// `Phi_x(k, m) - A0 Phi_x(k-1, m) - B0 Phi_u(k-1, m)` in dense indexing.
pub fn upsilon(resp: &SystemResponse, sys: &MultNoiseSystem, horizon: usize) -> Result<DMatrix<f64>> {
    check_response(resp, sys, horizon)?;
    let n = sys.n();
    let mut out = DMatrix::zeros(n * horizon, n * horizon);
    for k in 0..horizon {
        for m in 0..=k {
            let mut blk = resp.phi_x.dense_block(k, m).expect("lower block").clone();
            if k > m {
                blk -= &sys.a0 * resp.phi_x.dense_block(k - 1, m).expect("lower block");
                blk -= &sys.b0 * resp.phi_u.dense_block(k - 1, m).expect("lower block");
            }
            out.view_mut((k * n, m * n), (n, n)).copy_from(&blk);
        }
    }
    Ok(out)
}

/// Blockwise `Psi` and its strictly lower blocks `Lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiDecomposition {
    pub psi: DMatrix<f64>,
    /// Keyed by dense `(row_block, col_block)` with `row_block > col_block`.
    pub lambda: BTreeMap<(usize, usize), DMatrix<f64>>,
}

pub fn psi_and_lambda(
    resp: &SystemResponse,
    sample: &ScenarioSample,
    sys: &MultNoiseSystem,
    horizon: usize,
) -> Result<PsiDecomposition> {
    sample.check(sys, horizon)?;
    let k = controller_from_response(resp)?;
    let th = build_theta(&k, sys, horizon)?;
    psi_with_omega(resp, &omega(sample, &th.theta)?, sys, horizon)
}

/// Blockwise `Psi` for a given `Omega` (which the scenario program fixes).
pub fn psi_with_omega(
    resp: &SystemResponse,
    om: &DMatrix<f64>,
    sys: &MultNoiseSystem,
    horizon: usize,
) -> Result<PsiDecomposition> {
    let n = sys.n();
    if om.shape() != (n * horizon, n * horizon) {
        return dim_err("Omega has the wrong shape");
    }
    let ups = upsilon(resp, sys, horizon)?;
    let blk = |m: &DMatrix<f64>, i: usize, j: usize| m.view((i * n, j * n), (n, n)).into_owned();
    let mut psi = DMatrix::zeros(n * horizon, n * horizon);
    let mut lambda = BTreeMap::new();
    for r in 0..horizon {
        psi.view_mut((r * n, r * n), (n, n)).copy_from(&(blk(&ups, r, r) - DMatrix::identity(n, n)));
        for c in 0..r {
            let mut acc = DMatrix::zeros(n, n);
            for l in c..=r {
                acc += blk(&ups, r, l) * blk(om, l, c);
            }
            psi.view_mut((r * n, c * n), (n, n)).copy_from(&acc);
            lambda.insert((r, c), acc);
        }
    }
    Ok(PsiDecomposition { psi, lambda })
}

/// Sparse affine map from response coordinates to one `Lambda` entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRow {
    pub block: (usize, usize),
    pub entry: (usize, usize),
    /// `(coordinate, coefficient)` in [`ResponseLayout`] order; duplicates
    /// already merged.
    pub terms: Vec<(usize, f64)>,
}

/// Coefficients of every `Lambda` entry as a linear function of the response
/// entries, for a fixed `Omega`. Rows are ordered by block row, block column,
/// then entry row and entry column.
pub fn lambda_coefficients(om: &DMatrix<f64>, sys: &MultNoiseSystem, horizon: usize) -> Result<Vec<LambdaRow>> {
    let (n, m_in) = (sys.n(), sys.m());
    if om.shape() != (n * horizon, n * horizon) {
        return dim_err("Omega has the wrong shape");
    }
    let lay = ResponseLayout::new(horizon, n, m_in);
    let mut rows = Vec::with_capacity(horizon * horizon.saturating_sub(1) / 2 * n * n);
    for k in 0..horizon {
        for m in 0..k {
            for r in 0..n {
                for c in 0..n {
                    let mut terms: BTreeMap<usize, f64> = BTreeMap::new();
                    for l in m..=k {
                        for j in 0..n {
                            let w = om[(l * n + j, m * n + c)];
                            if w == 0.0 {
                                continue;
                            }
                            *terms.entry(lay.x_index(k, l, r, j)).or_default() += w;
                            if k > l {
                                for i in 0..n {
                                    let a = sys.a0[(r, i)];
                                    if a != 0.0 {
                                        *terms.entry(lay.x_index(k - 1, l, i, j)).or_default() -= a * w;
                                    }
                                }
                                for i in 0..m_in {
                                    let b = sys.b0[(r, i)];
                                    if b != 0.0 {
                                        *terms.entry(lay.u_index(k - 1, l, i, j)).or_default() -= b * w;
                                    }
                                }
                            }
                        }
                    }
                    rows.push(LambdaRow {
                        block: (k, m),
                        entry: (r, c),
                        terms: terms.into_iter().filter(|(_, v)| *v != 0.0).collect(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Response of the realized time-varying system under `K`.
pub fn realized_response(
    k: &BltOperator,
    sample: &ScenarioSample,
    sys: &MultNoiseSystem,
    horizon: usize,
) -> Result<SystemResponse> {
    check_k(k, sys, horizon)?;
    sample.check(sys, horizon)?;
    let (n, m) = (sys.n(), sys.m());
    let mut a_blocks = Vec::with_capacity(horizon);
    let mut b_blocks = Vec::with_capacity(horizon);
    for t in 0..horizon {
        if t + 1 < horizon {
            let d: Vec<f64> = sample.deltas.row(t).iter().copied().collect();
            let (a, b) = sys.realized(&d);
            a_blocks.push(a);
            b_blocks.push(b);
        } else {
            a_blocks.push(DMatrix::zeros(n, n));
            b_blocks.push(DMatrix::zeros(n, m));
        }
    }
    let a = BltOperator::block_diagonal(&a_blocks)?;
    let b = BltOperator::block_diagonal(&b_blocks)?;
    let z = crate::blt::block_downshift(horizon, n);
    let cl = BltOperator::identity(horizon, n).sub(&z.mul(&a.add(&b.mul(k)?)?)?)?;
    let phi_x = cl.inverse()?;
    let phi_u = k.mul(&phi_x)?;
    Ok(SystemResponse { phi_x, phi_u })
}

/// Achievability residual of the distorted response
/// `[Phibar_x; Phibar_u] (I + Dbar)^{-1}` on the realized system:
/// `(I - Z A(d)) Phi_x - Z B(d) Phi_u - I`. It vanishes when `resp` is the
/// nominal response of its own controller, and reduces to the nominal affine
/// residual when all noise samples are zero.
pub fn perturbed_residual(
    resp: &SystemResponse,
    sample: &ScenarioSample,
    sys: &MultNoiseSystem,
    horizon: usize,
) -> Result<DMatrix<f64>> {
    check_response(resp, sys, horizon)?;
    sample.check(sys, horizon)?;
    let n = sys.n();
    let k = controller_from_response(resp)?;
    let th = build_theta(&k, sys, horizon)?;
    let om = omega(sample, &th.theta)?;
    let om_inv = om.clone().lu().try_inverse().ok_or(Error::SingularBlock { index: 0, condition: f64::INFINITY })?;
    let phi_x = resp.phi_x.to_dense() * &om_inv;
    let phi_u = resp.phi_u.to_dense() * &om_inv;
    let z = crate::blt::block_downshift(horizon, n).to_dense();
    let mut a_real = DMatrix::zeros(n * horizon, n * horizon);
    let mut b_real = DMatrix::zeros(n * horizon, sys.m() * horizon);
    for t in 0..horizon.saturating_sub(1) {
        let d: Vec<f64> = sample.deltas.row(t).iter().copied().collect();
        let (a, b) = sys.realized(&d);
        a_real.view_mut((t * n, t * n), (n, n)).copy_from(&a);
        b_real.view_mut((t * n, t * sys.m()), (n, sys.m())).copy_from(&b);
    }
    let ident = DMatrix::<f64>::identity(n * horizon, n * horizon);
    Ok((&ident - &z * a_real) * phi_x - z * b_real * phi_u - ident)
}

/// `n_delta + 2 sqrt(n_delta ln(1/eps)) + 2 ln(1/eps)`.
pub fn chernoff_radius(n_delta: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Parameter { name: "eps", value: eps, range: "(0, 1)" });
    }
    if n_delta == 0 {
        return Err(Error::Parameter { name: "n_delta", value: 0.0, range: "[1, inf)" });
    }
    let k = n_delta as f64;
    let l = (1.0 / eps).ln();
    Ok(k + 2.0 * (k * l).sqrt() + 2.0 * l)
}

/// `{ x : x - c in range(S), (x - c)' S^+ (x - c) <= 1 }`.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidSet {
    center: DVector<f64>,
    shape: DMatrix<f64>,
    confidence: f64,
    basis: DMatrix<f64>,
    inv_eigs: DVector<f64>,
}

impl EllipsoidSet {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>, confidence: f64) -> Result<Self> {
        let n = center.len();
        if shape.shape() != (n, n) {
            return dim_err("ellipsoid shape must match the center");
        }
        let eig = SymmetricEigen::new((&shape + shape.transpose()) * 0.5);
        let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
        if eig.eigenvalues.min() < -1e-10 * top.max(1.0) {
            return Err(Error::Definiteness { name: "ellipsoid shape", property: "positive semidefinite" });
        }
        let keep: Vec<usize> = (0..n).filter(|&i| top > 0.0 && eig.eigenvalues[i] > 1e-12 * top).collect();
        let basis = DMatrix::from_fn(n, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])]);
        let inv_eigs = DVector::from_fn(keep.len(), |i, _| 1.0 / eig.eigenvalues[keep[i]]);
        Ok(EllipsoidSet { center, shape, confidence, basis, inv_eigs })
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// `(x - c)' S^+ (x - c)`, or `None` when `x - c` leaves the range of `S`.
    pub fn mahalanobis(&self, x: &DVector<f64>) -> Option<f64> {
        let dev = x - &self.center;
        let coords = self.basis.transpose() * &dev;
        let orth = &dev - &self.basis * &coords;
        if orth.norm() > 1e-8 * dev.norm() {
            return None;
        }
        Some(coords.component_mul(&coords).dot(&self.inv_eigs))
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.mahalanobis(x).is_some_and(|d| d <= 1.0)
    }
}

fn one_step(
    sys: &MultNoiseSystem,
    k_static: &DMatrix<f64>,
    x_t: &DVector<f64>,
    w_t: &DVector<f64>,
    eps: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, m) = (sys.n(), sys.m());
    if k_static.shape() != (m, n) || x_t.len() != n || w_t.len() != n {
        return dim_err("ellipsoid inputs do not match the system");
    }
    let radius = chernoff_radius(sys.n_delta(), eps)?;
    let center = (&sys.a0 + &sys.b0 * k_static) * x_t + w_t;
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..sys.n_delta() {
        let g = (&sys.a_dirs[i] + &sys.b_dirs[i] * k_static) * x_t;
        cov += &g * g.transpose() * sys.sigma[i].powi(2);
    }
    Ok((center, cov * radius))
}

/// High-confidence set for `x_{t+1}` given `x_t` under `u_t = K x_t`.
pub fn state_ellipsoid(
    sys: &MultNoiseSystem,
    k_static: &DMatrix<f64>,
    x_t: &DVector<f64>,
    w_t: &DVector<f64>,
    eps: f64,
) -> Result<EllipsoidSet> {
    let (c, s) = one_step(sys, k_static, x_t, w_t, eps)?;
    EllipsoidSet::new(c, s, 1.0 - eps)
}

/// High-confidence set for `u_{t+1} = K x_{t+1}`.
pub fn input_ellipsoid(
    sys: &MultNoiseSystem,
    k_static: &DMatrix<f64>,
    x_t: &DVector<f64>,
    w_t: &DVector<f64>,
    eps: f64,
) -> Result<EllipsoidSet> {
    let (c, s) = one_step(sys, k_static, x_t, w_t, eps)?;
    EllipsoidSet::new(k_static * c, k_static * s * k_static.transpose(), 1.0 - eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMethod {
    ClosedForm,
    MonteCarlo { samples: usize },
}

/// Column `(t, i)` is `vec(Dbar)` per unit `d_t^i` (column-major vec).
pub fn lambda_coefficient_columns(theta: &DMatrix<f64>, n: usize, n_delta: usize) -> Result<DMatrix<f64>> {
    let dim = theta.ncols();
    if n == 0 || !dim.is_multiple_of(n) || theta.nrows() != dim * n_delta {
        return dim_err("Theta has the wrong shape");
    }
    let horizon = dim / n;
    let cols = horizon.saturating_sub(1) * n_delta;
    let mut out = DMatrix::zeros(dim * dim, cols);
    for t in 0..horizon.saturating_sub(1) {
        for i in 0..n_delta {
            let col = t * n_delta + i;
            let src = theta.view((t * n * n_delta + i * n, 0), (n, dim));
            for c in 0..dim {
                for r in 0..n {
                    out[(c * dim + (t + 1) * n + r, col)] = src[(r, c)];
                }
            }
        }
    }
    Ok(out)
}

/// `E ||Dbar||_F^2` for zero-mean independent `d_t^i` with standard
/// deviations `sigma`.
pub fn lambda_bound(theta: &DMatrix<f64>, sigma: &[f64], n: usize, method: LambdaMethod, seed: u64) -> Result<f64> {
    let k = sigma.len();
    let dim = theta.ncols();
    if k == 0 && theta.nrows() == 0 {
        return Ok(0.0);
    }
    if n == 0 || k == 0 || !dim.is_multiple_of(n) || theta.nrows() != dim * k {
        return dim_err("Theta does not match n and the number of noise directions");
    }
    let horizon = dim / n;
    let piece = |t: usize, i: usize| theta.view((t * n * k + i * n, 0), (n, dim));
    match method {
        LambdaMethod::ClosedForm => Ok((0..horizon.saturating_sub(1))
            .flat_map(|t| (0..k).map(move |i| (t, i)))
            .map(|(t, i)| sigma[i].powi(2) * piece(t, i).norm_squared())
            .sum()),
        LambdaMethod::MonteCarlo { samples } => {
            if samples == 0 {
                return Err(Error::Parameter { name: "samples", value: 0.0, range: "[1, inf)" });
            }
            use rand_distr::{Distribution, StandardNormal};
            let mut total = 0.0;
            let mut acc = DMatrix::zeros(n, dim);
            for s in 0..samples {
                let mut rng = rng_from_seed(derive_seed(seed, s as u64));
                for t in 0..horizon.saturating_sub(1) {
                    acc.fill(0.0);
                    for (i, sd) in sigma.iter().enumerate() {
                        let d: f64 = StandardNormal.sample(&mut rng);
                        acc += piece(t, i) * (sd * d);
                    }
                    total += acc.norm_squared();
                }
            }
            Ok(total / samples as f64)
        }
    }
}

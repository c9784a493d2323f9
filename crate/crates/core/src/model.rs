//! Linear systems with multiplicative and additive noise.
//!
//! The dynamics are
//!
//! ```text
//! x_{t+1} = (A0 + sum_i d_t^i A_i) x_t + (B0 + sum_i d_t^i B_i) u_t + W_t
//! ```
//!
//! with scalar `d_t^i` i.i.d. across time, mutually independent across
//! directions, zero mean and variance `sigma_i^2`, and `W_t` a diagonal
//! Gaussian with variances `alpha`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::blt::{block_downshift, BltOperator};
use crate::error::{dim_err, Error, Result};
use crate::linalg::{check_pd, check_psd, check_square, matrix_from_rows, matrix_to_rows};
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// Shape of the multiplicative noise. Every variant is standardized to zero
/// mean and unit variance before being scaled by `sigma_i`; bounds are in
/// standard-deviation units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeltaDist {
    #[default]
    Gaussian,
    TruncatedGaussian {
        lo: f64,
        hi: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
}

impl DeltaDist {
    /// Truncated normal on `[-2, 2]` standard deviations.
    pub fn truncated_default() -> Self {
        DeltaDist::TruncatedGaussian { lo: -2.0, hi: 2.0 }
    }

    pub fn sampler(&self) -> Result<DeltaSampler> {
        match *self {
            DeltaDist::Gaussian => Ok(DeltaSampler::Gaussian),
            DeltaDist::TruncatedGaussian { lo, hi } => {
                if !(lo < hi) {
                    return Err(Error::Parameter { name: "truncated_gaussian.lo", value: lo, range: "lo < hi" });
                }
                let normal = Normal::standard();
                let mass = normal.cdf(hi) - normal.cdf(lo);
                if mass < 1e-4 {
                    return Err(Error::Parameter { name: "truncated_gaussian.mass", value: mass, range: "[1e-4, 1]" });
                }
                let (pl, ph) = (normal.pdf(lo), normal.pdf(hi));
                // pdf * bound is 0 at infinite bounds
                let lo_term = if lo.is_finite() { lo * pl } else { 0.0 };
                let hi_term = if hi.is_finite() { hi * ph } else { 0.0 };
                let mean = (pl - ph) / mass;
                let var = 1.0 + (lo_term - hi_term) / mass - mean * mean;
                Ok(DeltaSampler::Truncated { lo, hi, mean, sd: var.sqrt() })
            }
            DeltaDist::Uniform { lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::Parameter { name: "uniform.lo", value: lo, range: "finite lo < hi" });
                }
                Ok(DeltaSampler::Uniform { lo, hi, mean: 0.5 * (lo + hi), sd: (hi - lo) / 12f64.sqrt() })
            }
        }
    }
}

/// Draws standardized (zero-mean, unit-variance) noise values.
#[derive(Debug, Clone, Copy)]
pub enum DeltaSampler {
    Gaussian,
    Truncated { lo: f64, hi: f64, mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64, mean: f64, sd: f64 },
}

impl DeltaSampler {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            DeltaSampler::Gaussian => StandardNormal.sample(rng),
            DeltaSampler::Truncated { lo, hi, mean, sd } => loop {
                let z: f64 = StandardNormal.sample(rng);
                if z >= lo && z <= hi {
                    break (z - mean) / sd;
                }
            },
            DeltaSampler::Uniform { lo, hi, mean, sd } => (rng.random_range(lo..hi) - mean) / sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemDocument", into = "SystemDocument")]
pub struct MultNoiseSystem {
    pub a0: DMatrix<f64>,
    pub b0: DMatrix<f64>,
    pub a_dirs: Vec<DMatrix<f64>>,
    pub b_dirs: Vec<DMatrix<f64>>,
    pub sigma: Vec<f64>,
    pub delta_dist: DeltaDist,
    /// Additive-noise variances, one per state.
    pub alpha: Vec<f64>,
}

impl MultNoiseSystem {
    pub fn new(
        a0: DMatrix<f64>,
        b0: DMatrix<f64>,
        a_dirs: Vec<DMatrix<f64>>,
        b_dirs: Vec<DMatrix<f64>>,
        sigma: Vec<f64>,
        delta_dist: DeltaDist,
        alpha: Vec<f64>,
    ) -> Result<Self> {
        let sys = MultNoiseSystem { a0, b0, a_dirs, b_dirs, sigma, delta_dist, alpha };
        sys.validate()?;
        Ok(sys)
    }

    /// Noise-free LTI system `x+ = A x + B u`.
    pub fn nominal(a0: DMatrix<f64>, b0: DMatrix<f64>) -> Result<Self> {
        let n = a0.nrows();
        Self::new(a0, b0, vec![], vec![], vec![], DeltaDist::Gaussian, vec![0.0; n])
    }

    /// The scalar example `x+ = (0.8 + d) x + 0.5 u` with a truncated normal
    /// `d` of standard deviation 0.5.
    pub fn scalar_example() -> Self {
        Self::new(
            DMatrix::from_element(1, 1, 0.8),
            DMatrix::from_element(1, 1, 0.5),
            vec![DMatrix::from_element(1, 1, 1.0)],
            vec![DMatrix::zeros(1, 1)],
            vec![0.5],
            DeltaDist::truncated_default(),
            vec![0.0],
        )
        .expect("valid example system")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a0.nrows();
        check_square("A0", &self.a0, n)?;
        if n == 0 {
            return dim_err("state dimension must be positive");
        }
        let m = self.b0.ncols();
        if self.b0.nrows() != n || m == 0 {
            return dim_err(format!("B0 is {}x{}, expected {n}xm with m > 0", self.b0.nrows(), m));
        }
        let k = self.sigma.len();
        if self.a_dirs.len() != k || self.b_dirs.len() != k {
            return dim_err(format!(
                "{} A directions, {} B directions and {k} sigmas",
                self.a_dirs.len(),
                self.b_dirs.len()
            ));
        }
        for (i, (a, b)) in self.a_dirs.iter().zip(&self.b_dirs).enumerate() {
            if a.shape() != (n, n) || b.shape() != (n, m) {
                return dim_err(format!("direction {i} has wrong shape"));
            }
        }
        if let Some(&s) = self.sigma.iter().find(|s| !(**s >= 0.0)) {
            return Err(Error::Parameter { name: "sigma", value: s, range: "[0, inf)" });
        }
        if self.alpha.len() != n {
            return dim_err(format!("alpha has {} entries, expected {n}", self.alpha.len()));
        }
        if let Some(&a) = self.alpha.iter().find(|a| !(**a >= 0.0)) {
            return Err(Error::Parameter { name: "alpha", value: a, range: "[0, inf)" });
        }
        self.delta_dist.sampler()?;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a0.nrows()
    }

    pub fn m(&self) -> usize {
        self.b0.ncols()
    }

    pub fn n_delta(&self) -> usize {
        self.sigma.len()
    }

    /// Stacked directions `[A_1; ...; A_k]` (`n k x n`).
    pub fn stacked_a(&self) -> DMatrix<f64> {
        stack_rows(&self.a_dirs, self.n(), self.n())
    }

    /// Stacked directions `[B_1; ...; B_k]` (`n k x m`).
    pub fn stacked_b(&self) -> DMatrix<f64> {
        stack_rows(&self.b_dirs, self.n(), self.m())
    }

    /// `A(d)` and `B(d)` for one noise realization.
    pub fn realized(&self, delta: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut a = self.a0.clone();
        let mut b = self.b0.clone();
        for (i, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                a += &self.a_dirs[i] * d;
                b += &self.b_dirs[i] * d;
            }
        }
        (a, b)
    }

    pub fn with_sigma(&self, sigma: Vec<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.sigma = sigma;
        out.validate()?;
        Ok(out)
    }
}

fn stack_rows(blocks: &[DMatrix<f64>], rows: usize, cols: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows * blocks.len(), cols);
    for (i, b) in blocks.iter().enumerate() {
        out.view_mut((i * rows, 0), (rows, cols)).copy_from(b);
    }
    out
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct SystemDocument {
    n: usize,
    m: usize,
    n_delta: usize,
    A0: Vec<Vec<f64>>,
    B0: Vec<Vec<f64>>,
    A_dirs: Vec<Vec<Vec<f64>>>,
    B_dirs: Vec<Vec<Vec<f64>>>,
    sigma: Vec<f64>,
    #[serde(default)]
    delta_dist: DeltaDist,
    alpha: Vec<f64>,
}

impl TryFrom<SystemDocument> for MultNoiseSystem {
    type Error = Error;

    fn try_from(doc: SystemDocument) -> Result<Self> {
        let (n, m) = (doc.n, doc.m);
        if doc.A_dirs.len() != doc.n_delta {
            return dim_err(format!("n_delta = {} but {} A directions", doc.n_delta, doc.A_dirs.len()));
        }
        let a_dirs = doc.A_dirs.iter().map(|a| matrix_from_rows(a, n, n)).collect::<Result<Vec<_>>>()?;
        let b_dirs = doc.B_dirs.iter().map(|b| matrix_from_rows(b, n, m)).collect::<Result<Vec<_>>>()?;
        MultNoiseSystem::new(
            matrix_from_rows(&doc.A0, n, n)?,
            matrix_from_rows(&doc.B0, n, m)?,
            a_dirs,
            b_dirs,
            doc.sigma,
            doc.delta_dist,
            doc.alpha,
        )
    }
}

impl From<MultNoiseSystem> for SystemDocument {
    fn from(sys: MultNoiseSystem) -> Self {
        SystemDocument {
            n: sys.n(),
            m: sys.m(),
            n_delta: sys.n_delta(),
            A0: matrix_to_rows(&sys.a0),
            B0: matrix_to_rows(&sys.b0),
            A_dirs: sys.a_dirs.iter().map(matrix_to_rows).collect(),
            B_dirs: sys.b_dirs.iter().map(matrix_to_rows).collect(),
            sigma: sys.sigma,
            delta_dist: sys.delta_dist,
            alpha: sys.alpha,
        }
    }
}

/// One realization of all noise over a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTrace {
    pub horizon: usize,
    /// `T x n_delta`; row `t` holds `d_t`.
    pub deltas: DMatrix<f64>,
    /// Stacked disturbance `[x0; W_0; ...; W_{T-2}]`.
    pub w: DVector<f64>,
}

impl NoiseTrace {
    pub fn delta(&self, t: usize) -> Vec<f64> {
        self.deltas.row(t).iter().copied().collect()
    }

    pub fn w_block(&self, t: usize, n: usize) -> DVector<f64> {
        self.w.rows(t * n, n).into_owned()
    }
}

/// Draws `T` rows of multiplicative noise from `rng`.
pub(crate) fn draw_deltas(
    sys: &MultNoiseSystem,
    sampler: &DeltaSampler,
    horizon: usize,
    rng: &mut Rng,
) -> DMatrix<f64> {
    let k = sys.n_delta();
    let mut deltas = DMatrix::zeros(horizon, k);
    for t in 0..horizon {
        for i in 0..k {
            deltas[(t, i)] = sys.sigma[i] * sampler.sample(rng);
        }
    }
    deltas
}

pub fn sample_noise(sys: &MultNoiseSystem, horizon: usize, x0: &DVector<f64>, seed: u64) -> Result<NoiseTrace> {
    if horizon == 0 {
        return dim_err("horizon must be positive");
    }
    let n = sys.n();
    if x0.len() != n {
        return dim_err(format!("x0 has length {}, expected {n}", x0.len()));
    }
    let sampler = sys.delta_dist.sampler()?;
    let mut rng = rng_from_seed(seed);
    let deltas = draw_deltas(sys, &sampler, horizon, &mut rng);
    let mut w = DVector::zeros(n * horizon);
    w.rows_mut(0, n).copy_from(x0);
    let scales: Vec<f64> = sys.alpha.iter().map(|a| a.sqrt()).collect();
    for t in 1..horizon {
        for j in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            w[t * n + j] = scales[j] * z;
        }
    }
    Ok(NoiseTrace { horizon, deltas, w })
}

pub fn step(
    sys: &MultNoiseSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    delta: &[f64],
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.len() != sys.n() || u.len() != sys.m() || w.len() != sys.n() || delta.len() != sys.n_delta() {
        return dim_err("step: state, input, noise or disturbance has wrong length");
    }
    let mut next = &sys.a0 * x + &sys.b0 * u + w;
    for (i, &d) in delta.iter().enumerate() {
        if d != 0.0 {
            next.gemv(d, &sys.a_dirs[i], x, 1.0);
            next.gemv(d, &sys.b_dirs[i], u, 1.0);
        }
    }
    Ok(next)
}

/// States and inputs over `t = 0..T-1`; row `t` is time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.nrows()
    }
}

fn check_controller(sys: &MultNoiseSystem, k: &BltOperator, horizon: usize) -> Result<()> {
    if k.horizon() != horizon || k.block_rows() != sys.m() || k.block_cols() != sys.n() {
        return dim_err(format!(
            "controller is (T={}, {}x{}), expected (T={horizon}, {}x{})",
            k.horizon(),
            k.block_rows(),
            k.block_cols(),
            sys.m(),
            sys.n()
        ));
    }
    Ok(())
}

/// Closed-loop simulation under the causal controller `u_t = sum_s K^{t,t-s} x_s`.
pub fn rollout(sys: &MultNoiseSystem, k: &BltOperator, trace: &NoiseTrace) -> Result<Trajectory> {
    let horizon = trace.horizon;
    check_controller(sys, k, horizon)?;
    let (n, m) = (sys.n(), sys.m());
    if trace.w.len() != n * horizon || trace.deltas.shape() != (horizon, sys.n_delta()) {
        return dim_err("noise trace does not match system dimensions");
    }
    let mut xs: Vec<DVector<f64>> = Vec::with_capacity(horizon);
    let mut states = DMatrix::zeros(horizon, n);
    let mut inputs = DMatrix::zeros(horizon, m);
    xs.push(trace.w_block(0, n));
    for t in 0..horizon {
        let mut u = DVector::zeros(m);
        for (s, x) in xs.iter().enumerate() {
            u.gemv(1.0, k.block(t, t - s), x, 1.0);
        }
        states.row_mut(t).copy_from(&xs[t].transpose());
        inputs.row_mut(t).copy_from(&u.transpose());
        if t + 1 < horizon {
            let next = step(sys, &xs[t], &u, &trace.delta(t), &trace.w_block(t + 1, n))?;
            xs.push(next);
        }
    }
    Ok(Trajectory { states, inputs })
}

/// `sum_t x_t' Q x_t + u_t' R u_t` over the trajectory.
pub fn lqr_cost(traj: &Trajectory, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<f64> {
    check_square("Q", q, traj.states.ncols())?;
    check_square("R", r, traj.inputs.ncols())?;
    check_psd("Q", q)?;
    check_pd("R", r)?;
    Ok(quadratic_cost(traj, q, r))
}

/// Cost without the definiteness checks, for hot loops after validation.
pub(crate) fn quadratic_cost(traj: &Trajectory, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    let xs = (&traj.states * q).component_mul(&traj.states).sum();
    let us = (&traj.inputs * r).component_mul(&traj.inputs).sum();
    (xs + us).max(0.0)
}

/// Stacked nominal operators `Z`, `A0cal = blkdiag(A0, ..., A0, 0)` and
/// `B0cal = blkdiag(B0, ..., B0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedNominal {
    pub z: BltOperator,
    pub a: BltOperator,
    pub b: BltOperator,
}

impl StackedNominal {
    pub fn horizon(&self) -> usize {
        self.z.horizon()
    }

    /// `Z A0cal`.
    pub fn za(&self) -> BltOperator {
        self.z.mul(&self.a).expect("conformable")
    }

    /// `Z B0cal`.
    pub fn zb(&self) -> BltOperator {
        self.z.mul(&self.b).expect("conformable")
    }

    /// `I - Z (A0cal + B0cal K)`.
    pub fn closed_loop(&self, k: &BltOperator) -> Result<BltOperator> {
        let n = self.a.block_rows();
        let bk = self.b.mul(k)?;
        let inner = self.a.add(&bk)?;
        BltOperator::identity(self.horizon(), n).sub(&self.z.mul(&inner)?)
    }
}

pub fn stacked_nominal(sys: &MultNoiseSystem, horizon: usize) -> Result<StackedNominal> {
    if horizon == 0 {
        return dim_err("horizon must be positive");
    }
    let (n, m) = (sys.n(), sys.m());
    let a_blocks: Vec<_> =
        (0..horizon).map(|t| if t + 1 < horizon { sys.a0.clone() } else { DMatrix::zeros(n, n) }).collect();
    let b_blocks: Vec<_> =
        (0..horizon).map(|t| if t + 1 < horizon { sys.b0.clone() } else { DMatrix::zeros(n, m) }).collect();
    Ok(StackedNominal {
        z: block_downshift(horizon, n),
        a: BltOperator::block_diagonal(&a_blocks)?,
        b: BltOperator::block_diagonal(&b_blocks)?,
    })
}

/// Empirical second-moment trajectory under repeated application of a
/// finite-horizon controller.
#[derive(Debug, Clone, PartialEq)]
pub struct MsDiagnostic {
    /// `E ||x_t||^2` (trace of the second moment) for `t = 0..horizon_long-1`.
    pub second_moment: Vec<f64>,
    pub initial_window: f64,
    pub final_window: f64,
    pub decreasing: bool,
}

/// Mean-square decay check. The horizon-`T` controller is restarted every
/// `T` steps with the current state as its initial state; only the
/// multiplicative noise is simulated. This is an empirical diagnostic, not a
/// stability certificate.
pub fn ms_diagnostic(
    sys: &MultNoiseSystem,
    k: &BltOperator,
    x0: &DVector<f64>,
    horizon_long: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<MsDiagnostic> {
    let horizon = k.horizon();
    check_controller(sys, k, horizon)?;
    if x0.len() != sys.n() || horizon_long < 2 || n_rollouts == 0 {
        return dim_err("ms_diagnostic needs matching x0, horizon_long >= 2 and rollouts > 0");
    }
    let sampler = sys.delta_dist.sampler()?;
    let m = sys.m();
    let mut moment = vec![0.0; horizon_long];
    let zero_w = DVector::zeros(sys.n());
    for r in 0..n_rollouts {
        let mut rng = rng_from_seed(derive_seed(seed, r as u64));
        let mut window: Vec<DVector<f64>> = Vec::with_capacity(horizon);
        let mut x = x0.clone();
        for (t, slot) in moment.iter_mut().enumerate() {
            *slot += x.norm_squared();
            let phase = t % horizon;
            if phase == 0 {
                window.clear();
            }
            window.push(x.clone());
            let mut u = DVector::zeros(m);
            for (s, xs) in window.iter().enumerate() {
                u.gemv(1.0, k.block(phase, phase - s), xs, 1.0);
            }
            let delta: Vec<f64> = (0..sys.n_delta()).map(|i| sys.sigma[i] * sampler.sample(&mut rng)).collect();
            x = step(sys, &x, &u, &delta, &zero_w)?;
        }
    }
    moment.iter_mut().for_each(|v| *v /= n_rollouts as f64);
    let w = (horizon_long / 5).max(1);
    let initial_window = moment[..w].iter().sum::<f64>() / w as f64;
    let final_window = moment[horizon_long - w..].iter().sum::<f64>() / w as f64;
    Ok(MsDiagnostic { decreasing: final_window < initial_window, second_moment: moment, initial_window, final_window })
}

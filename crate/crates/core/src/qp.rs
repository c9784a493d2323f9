//! Convex quadratic programs
//!
//! ```text
//! minimize    1/2 z' P z + q' z
//! subject to  A_eq z = b_eq
//!             lo <= G z <= hi
//! ```
//!
//! solved by an operator-splitting (ADMM) iteration in the style of OSQP:
//! Ruiz equilibration, a cached Cholesky factor of the reduced linear system,
//! over-relaxation, adaptive step size, an infeasibility certificate and a
//! final active-set polish. Initialization is always `z = 0`, so solves are
//! bit-for-bit reproducible.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub g: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem; add constraints with the builder methods.
    pub fn new(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let dim = q.len();
        QpProblem {
            p,
            q,
            a_eq: DMatrix::zeros(0, dim),
            b_eq: DVector::zeros(0),
            g: DMatrix::zeros(0, dim),
            lo: DVector::zeros(0),
            hi: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Self {
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, lo: DVector<f64>, hi: DVector<f64>) -> Self {
        self.g = g;
        self.lo = lo;
        self.hi = hi;
        self
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.p * z)) + self.q.dot(z)
    }

    /// Largest violation of any equality or inequality at `z`.
    pub fn constraint_violation(&self, z: &DVector<f64>) -> f64 {
        let eq = if self.a_eq.nrows() > 0 { (&self.a_eq * z - &self.b_eq).amax() } else { 0.0 };
        let gz = &self.g * z;
        let ineq = (0..gz.len()).map(|i| (self.lo[i] - gz[i]).max(gz[i] - self.hi[i]).max(0.0)).fold(0.0, f64::max);
        eq.max(ineq)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.p.shape() != (n, n) {
            return dim_err(format!("P is {:?}, expected {n}x{n}", self.p.shape()));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return dim_err("equality system has inconsistent shape");
        }
        if self.g.ncols() != n || self.g.nrows() != self.lo.len() || self.g.nrows() != self.hi.len() {
            return dim_err("inequality system has inconsistent shape");
        }
        if let Some(i) = (0..self.lo.len()).find(|&i| !(self.lo[i] <= self.hi[i])) {
            return dim_err(format!("inequality row {i} has lo > hi"));
        }
        let scale = self.p.amax().max(1.0);
        if (&self.p - self.p.transpose()).amax() > 1e-9 * scale {
            return Err(Error::Definiteness { name: "P", property: "symmetric" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iters: usize,
    pub eps_infeasible: f64,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    pub check_interval: usize,
    pub adaptive_rho_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            max_iters: 200_000,
            eps_infeasible: 1e-7,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            check_interval: 10,
            adaptive_rho_interval: 50,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIters,
    Infeasible,
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIters => "max_iters",
            QpStatus::Infeasible => "infeasible",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    /// Largest constraint violation.
    pub primal_residual: f64,
    /// `||P z + q + A_eq' y_eq + G' y_ineq||_inf`.
    pub dual_residual: f64,
    pub y_eq: DVector<f64>,
    pub y_ineq: DVector<f64>,
    pub iterations: usize,
    pub polished: bool,
}

/// Stacked constraint data `l <= C z <= u` after dropping free rows.
struct Stacked {
    c: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    /// Original row of each stacked row: `Ok(eq_row)` or `Err(ineq_row)`.
    origin: Vec<std::result::Result<usize, usize>>,
}

fn stack_constraints(p: &QpProblem) -> Stacked {
    let n = p.dim();
    let mut rows = Vec::new();
    let mut origin = Vec::new();
    for i in 0..p.a_eq.nrows() {
        rows.push((p.a_eq.row(i).into_owned(), p.b_eq[i], p.b_eq[i]));
        origin.push(Ok(i));
    }
    for i in 0..p.g.nrows() {
        if p.lo[i] == f64::NEG_INFINITY && p.hi[i] == f64::INFINITY {
            continue;
        }
        rows.push((p.g.row(i).into_owned(), p.lo[i], p.hi[i]));
        origin.push(Err(i));
    }
    let mut c = DMatrix::zeros(rows.len(), n);
    let mut l = DVector::zeros(rows.len());
    let mut u = DVector::zeros(rows.len());
    for (k, (row, lo, hi)) in rows.into_iter().enumerate() {
        c.row_mut(k).copy_from(&row);
        l[k] = lo;
        u[k] = hi;
    }
    Stacked { c, l, u, origin }
}

fn clip_psd(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (p + p.transpose()) * 0.5;
    if sym.nrows() == 0 {
        return Ok(sym);
    }
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    let scale = eig.eigenvalues.amax().max(1.0);
    if min < -1e-9 * scale {
        return Err(Error::Definiteness { name: "P", property: "positive semidefinite" });
    }
    if min >= 0.0 {
        return Ok(sym);
    }
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

/// Ruiz equilibration of `[P C'; C 0]` plus cost scaling.
struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn equilibrate(p: &mut DMatrix<f64>, q: &mut DVector<f64>, cm: &mut DMatrix<f64>, iters: usize) -> Scaling {
    let n = q.len();
    let mc = cm.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(mc, 1.0);
    let mut cost = 1.0;
    let clamp = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
    for _ in 0..iters {
        let mut dd = DVector::zeros(n);
        for j in 0..n {
            let pn = p.column(j).amax();
            let cn = if mc > 0 { cm.column(j).amax() } else { 0.0 };
            dd[j] = 1.0 / clamp(pn.max(cn)).sqrt();
        }
        let mut ee = DVector::zeros(mc);
        for i in 0..mc {
            ee[i] = 1.0 / clamp(cm.row(i).amax()).sqrt();
        }
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..mc {
                cm[(i, j)] *= ee[i] * dd[j];
            }
        }
        q.component_mul_assign(&dd);
        d.component_mul_assign(&dd);
        e.component_mul_assign(&ee);
        let mean_col = if n > 0 { (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64 } else { 0.0 };
        let gamma = 1.0 / clamp(mean_col.max(inf_norm(q)));
        *p *= gamma;
        *q *= gamma;
        cost *= gamma;
    }
    Scaling { d, e, c: cost }
}

struct Factor {
    chol: Cholesky<f64, Dyn>,
}

fn factor(
    p: &DMatrix<f64>,
    gram_eq: &DMatrix<f64>,
    gram_in: &DMatrix<f64>,
    sigma: f64,
    rho_eq: f64,
    rho_in: f64,
) -> Result<Factor> {
    let n = p.nrows();
    let mut k = p + gram_eq * rho_eq + gram_in * rho_in;
    for i in 0..n {
        k[(i, i)] += sigma;
    }
    let chol = Cholesky::new(k).ok_or_else(|| Error::Solver("reduced KKT matrix not positive definite".into()))?;
    Ok(Factor { chol })
}

fn project(v: &mut DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) {
    for i in 0..v.len() {
        v[i] = v[i].max(l[i]).min(u[i]);
    }
}

/// Unscaled iterate and its residuals.
struct Candidate {
    x: DVector<f64>,
    y: DVector<f64>,
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
}

fn evaluate(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    st: &Stacked,
    x: DVector<f64>,
    y: DVector<f64>,
    cfg: &QpSettings,
) -> Candidate {
    let cx = &st.c * &x;
    let mut viol: f64 = 0.0;
    for i in 0..cx.len() {
        viol = viol.max(st.l[i] - cx[i]).max(cx[i] - st.u[i]);
    }
    let px = p * &x;
    let cty = st.c.transpose() * &y;
    let dual = inf_norm(&(&px + q + &cty));
    let eps_prim = cfg.eps_abs + cfg.eps_rel * inf_norm(&cx);
    let eps_dual = cfg.eps_abs + cfg.eps_rel * inf_norm(&px).max(inf_norm(&cty)).max(inf_norm(q));
    Candidate { x, y, prim: viol.max(0.0), dual, eps_prim, eps_dual }
}

fn converged(c: &Candidate) -> bool {
    c.prim <= c.eps_prim && c.dual <= c.eps_dual
}

/// Solves the equality-constrained problem on a guessed active set and checks
/// complementarity.
fn polish(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    st: &Stacked,
    z_scaled: &DVector<f64>,
    y_scaled: &DVector<f64>,
    scaled_l: &DVector<f64>,
    scaled_u: &DVector<f64>,
    cfg: &QpSettings,
) -> Option<Candidate> {
    let n = q.len();
    let mut active: Vec<(usize, f64, i8)> = Vec::new();
    for i in 0..st.c.nrows() {
        if st.l[i] == st.u[i] {
            active.push((i, st.l[i], 0));
        } else if z_scaled[i] - scaled_l[i] < -y_scaled[i] {
            active.push((i, st.l[i], -1));
        } else if scaled_u[i] - z_scaled[i] < y_scaled[i] {
            active.push((i, st.u[i], 1));
        }
    }
    let na = active.len();
    let dim = n + na;
    let delta = 1e-9;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(p);
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-q));
    for (k, &(row, b, _)) in active.iter().enumerate() {
        for j in 0..n {
            let v = st.c[(row, j)];
            kkt[(n + k, j)] = v;
            kkt[(j, n + k)] = v;
        }
        rhs[n + k] = b;
    }
    let mut reg = kkt.clone();
    for i in 0..dim {
        reg[(i, i)] += if i < n { delta } else { -delta };
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let r = &rhs - &kkt * &sol;
        if r.amax() < 1e-14 {
            break;
        }
        sol += lu.solve(&r)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let mut y = DVector::zeros(st.c.nrows());
    for (k, &(row, _, side)) in active.iter().enumerate() {
        let v = sol[n + k];
        let tol = cfg.eps_abs.max(1e-12);
        if (side == 1 && v < -tol) || (side == -1 && v > tol) {
            return None;
        }
        y[row] = v;
    }
    let cand = evaluate(p, q, st, x, y, cfg);
    converged(&cand).then_some(cand)
}

fn finish(
    problem: &QpProblem,
    st: &Stacked,
    cand: Candidate,
    status: QpStatus,
    iterations: usize,
    polished: bool,
) -> QpSolution {
    let mut y_eq = DVector::zeros(problem.a_eq.nrows());
    let mut y_ineq = DVector::zeros(problem.g.nrows());
    for (k, o) in st.origin.iter().enumerate() {
        match *o {
            Ok(i) => y_eq[i] = cand.y[k],
            Err(i) => y_ineq[i] = cand.y[k],
        }
    }
    let residual =
        &problem.p * &cand.x + &problem.q + problem.a_eq.transpose() * &y_eq + problem.g.transpose() * &y_ineq;
    QpSolution {
        objective: problem.objective(&cand.x),
        primal_residual: problem.constraint_violation(&cand.x),
        dual_residual: residual.amax(),
        z: cand.x,
        status,
        y_eq,
        y_ineq,
        iterations,
        polished,
    }
}

pub fn qp_solve(problem: &QpProblem, cfg: &QpSettings) -> Result<QpSolution> {
    problem.validate()?;
    let n = problem.dim();
    let p_clean = clip_psd(&problem.p)?;
    let st = stack_constraints(problem);
    let mc = st.c.nrows();

    let mut ps = p_clean.clone();
    let mut qs = problem.q.clone();
    let mut cs = st.c.clone();
    let sc = equilibrate(&mut ps, &mut qs, &mut cs, cfg.scaling_iters);
    let scale_bound = |v: f64, e: f64| if v.is_finite() { v * e } else { v };
    let ls = DVector::from_fn(mc, |i, _| scale_bound(st.l[i], sc.e[i]));
    let us = DVector::from_fn(mc, |i, _| scale_bound(st.u[i], sc.e[i]));
    let is_eq: Vec<bool> = (0..mc).map(|i| st.l[i] == st.u[i]).collect();

    let mut c_eq = cs.clone();
    let mut c_in = cs.clone();
    for i in 0..mc {
        if is_eq[i] {
            c_in.row_mut(i).fill(0.0);
        } else {
            c_eq.row_mut(i).fill(0.0);
        }
    }
    let gram_eq = c_eq.transpose() * &c_eq;
    let gram_in = c_in.transpose() * &c_in;
    drop((c_eq, c_in));

    let unscale = |x: &DVector<f64>, y: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        (x.component_mul(&sc.d), y.component_mul(&sc.e) / sc.c)
    };

    let mut rho = cfg.rho;
    let eq_factor = 1e3;
    let rho_vec = |rho: f64| DVector::from_fn(mc, |i, _| if is_eq[i] { rho * eq_factor } else { rho });
    let mut rhos = rho_vec(rho);
    let mut fac = factor(&ps, &gram_eq, &gram_in, cfg.sigma, rho * eq_factor, rho)?;

    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(mc);
    let mut y = DVector::zeros(mc);
    let mut best: Option<Candidate> = None;
    let mut next_polish = 0usize;
    let mut polish_gap = cfg.check_interval * 5;
    let alpha = cfg.alpha;

    for iter in 1..=cfg.max_iters {
        let y_prev = y.clone();
        let mut rhs = &x * cfg.sigma - &qs;
        let t = rhos.component_mul(&z) - &y;
        rhs.gemv_tr(1.0, &cs, &t, 1.0);
        let xt = fac.chol.solve(&rhs);
        let zt = &cs * &xt;
        x = &xt * alpha + &x * (1.0 - alpha);
        let z_relaxed = &zt * alpha + &z * (1.0 - alpha);
        let mut z_new = &z_relaxed + y.component_div(&rhos);
        project(&mut z_new, &ls, &us);
        y += (&z_relaxed - &z_new).component_mul(&rhos);
        z = z_new;

        if iter % cfg.check_interval != 0 && iter != cfg.max_iters {
            continue;
        }
        let (xu, yu) = unscale(&x, &y);
        let cand = evaluate(&p_clean, &problem.q, &st, xu, yu, cfg);
        if converged(&cand) {
            return Ok(finish(problem, &st, cand, QpStatus::Optimal, iter, false));
        }

        // primal infeasibility certificate
        let dy = &y - &y_prev;
        let dy_u = dy.component_mul(&sc.e);
        let dy_norm = inf_norm(&dy_u);
        if dy_norm > 1e-30 {
            let ctdy = (cs.transpose() * &dy).component_div(&sc.d);
            if inf_norm(&ctdy) <= cfg.eps_infeasible * dy_norm {
                let mut support = 0.0;
                let mut valid = true;
                for i in 0..mc {
                    let v = dy_u[i];
                    if v > 0.0 {
                        if st.u[i].is_infinite() {
                            if v > cfg.eps_infeasible * dy_norm {
                                valid = false;
                            }
                        } else {
                            support += st.u[i] * v;
                        }
                    } else if v < 0.0 {
                        if st.l[i].is_infinite() {
                            if -v > cfg.eps_infeasible * dy_norm {
                                valid = false;
                            }
                        } else {
                            support += st.l[i] * v;
                        }
                    }
                }
                if valid && support < -cfg.eps_infeasible * dy_norm {
                    return Ok(finish(problem, &st, cand, QpStatus::Infeasible, iter, false));
                }
            }
        }

        if cfg.polish
            && iter >= next_polish
            && cand.prim <= 1e-3 * (1.0 + cand.eps_prim / cfg.eps_abs.max(1e-300) * cfg.eps_abs)
            && cand.dual <= 1e-3 * (1.0 + cand.eps_dual)
        {
            let ys = y.clone();
            if let Some(pc) = polish(&p_clean, &problem.q, &st, &z, &ys, &ls, &us, cfg) {
                return Ok(finish(problem, &st, pc, QpStatus::Optimal, iter, true));
            }
            next_polish = iter + polish_gap;
            polish_gap *= 2;
        }

        let keep = match &best {
            None => true,
            Some(b) => cand.prim.max(cand.dual) < b.prim.max(b.dual),
        };
        if keep {
            best = Some(cand);
        }

        if iter % cfg.adaptive_rho_interval == 0 && mc > 0 {
            let cx = &cs * &x;
            let prim_s = inf_norm(&(&cx - &z)) / inf_norm(&cx).max(inf_norm(&z)).max(1e-30);
            let px = &ps * &x;
            let cty = cs.transpose() * &y;
            let dual_s =
                inf_norm(&(&px + &qs + &cty)) / inf_norm(&px).max(inf_norm(&cty)).max(inf_norm(&qs)).max(1e-30);
            if prim_s > 0.0 && dual_s > 0.0 {
                let new_rho = (rho * (prim_s / dual_s).sqrt()).clamp(1e-6, 1e6);
                if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                    rho = new_rho;
                    rhos = rho_vec(rho);
                    fac = factor(&ps, &gram_eq, &gram_in, cfg.sigma, rho * eq_factor, rho)?;
                }
            }
        }
    }
    let cand = best.expect("at least one residual check");
    Ok(finish(problem, &st, cand, QpStatus::MaxIters, cfg.max_iters, false))
}

/// Solves problems with many inequality rows by constraint generation:
/// [`qp_solve`] runs on a working set of rows, the most violated remaining
/// rows are added, and the loop stops once every row holds within
/// `eps_abs`. The result is a solution of the full problem.
pub fn qp_solve_lazy(problem: &QpProblem, cfg: &QpSettings, batch: usize) -> Result<QpSolution> {
    problem.validate()?;
    let rows = problem.g.nrows();
    if rows <= batch {
        return qp_solve(problem, cfg);
    }
    let gz_violation = |z: &DVector<f64>| -> Vec<f64> {
        let gz = &problem.g * z;
        (0..rows).map(|i| (problem.lo[i] - gz[i]).max(gz[i] - problem.hi[i])).collect()
    };
    let mut working: Vec<usize> = Vec::new();
    let mut in_set = vec![false; rows];
    let mut iterations = 0;
    let mut sub =
        problem.clone().with_inequalities(DMatrix::zeros(0, problem.dim()), DVector::zeros(0), DVector::zeros(0));
    loop {
        let sol = qp_solve(&sub, cfg)?;
        iterations += sol.iterations;
        if sol.status == QpStatus::Infeasible {
            return Ok(QpSolution { iterations, ..lift(problem, &working, sol) });
        }
        let viol = gz_violation(&sol.z);
        let mut add: Vec<usize> = (0..rows).filter(|&i| !in_set[i] && viol[i] > cfg.eps_abs).collect();
        if add.is_empty() {
            let mut full = lift(problem, &working, sol);
            full.iterations = iterations;
            if full.status == QpStatus::Optimal && full.primal_residual > cfg.eps_abs {
                full.status = QpStatus::MaxIters;
            }
            return Ok(full);
        }
        add.sort_by(|&a, &b| viol[b].total_cmp(&viol[a]).then(a.cmp(&b)));
        add.truncate(batch);
        for &i in &add {
            in_set[i] = true;
        }
        working.extend(add);
        working.sort_unstable();
        let g = DMatrix::from_fn(working.len(), problem.dim(), |i, j| problem.g[(working[i], j)]);
        let lo = DVector::from_fn(working.len(), |i, _| problem.lo[working[i]]);
        let hi = DVector::from_fn(working.len(), |i, _| problem.hi[working[i]]);
        sub = sub.with_inequalities(g, lo, hi);
    }
}

/// Maps a working-set solution back to the rows of the full problem.
fn lift(problem: &QpProblem, working: &[usize], sol: QpSolution) -> QpSolution {
    let mut y_ineq = DVector::zeros(problem.g.nrows());
    for (k, &i) in working.iter().enumerate() {
        y_ineq[i] = sol.y_ineq[k];
    }
    let residual =
        &problem.p * &sol.z + &problem.q + problem.a_eq.transpose() * &sol.y_eq + problem.g.transpose() * &y_ineq;
    QpSolution {
        objective: problem.objective(&sol.z),
        primal_residual: problem.constraint_violation(&sol.z),
        dual_residual: residual.amax(),
        y_ineq,
        ..sol
    }
}

/// Solution of `min ||C z - d||^2  s.t.  A_eq z = b_eq`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub residual: f64,
    /// Set when the KKT system was singular and a minimum-norm solution was used.
    pub rank_deficient: bool,
}

/// Direct solve of the augmented KKT system; falls back to the
/// minimum-norm (pseudo-inverse) solution when the system is singular.
pub fn qp_least_squares(
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    c: &DMatrix<f64>,
    d: &DVector<f64>,
) -> Result<LeastSquaresSolution> {
    let n = c.ncols();
    if a_eq.ncols() != n || a_eq.nrows() != b_eq.len() || c.nrows() != d.len() {
        return dim_err("least-squares system has inconsistent shape");
    }
    let me = a_eq.nrows();
    let dim = n + me;
    let mut kkt = DMatrix::zeros(dim, dim);
    let ctc = c.transpose() * c;
    kkt.view_mut((0, 0), (n, n)).copy_from(&(&ctc * 2.0));
    kkt.view_mut((n, 0), (me, n)).copy_from(a_eq);
    kkt.view_mut((0, n), (n, me)).copy_from(&a_eq.transpose());
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(c.transpose() * d * 2.0));
    rhs.rows_mut(n, me).copy_from(b_eq);

    let scale = kkt.amax().max(1.0) * rhs.amax().max(1.0);
    let direct = kkt
        .clone()
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()) && (&kkt * s - &rhs).amax() <= 1e-10 * scale);
    let (sol, rank_deficient) = match direct {
        Some(s) => (s, false),
        None => {
            log::warn!("singular KKT system in least-squares solve; using minimum-norm solution");
            let svd = kkt.clone().svd(true, true);
            let tol = 1e-12 * svd.singular_values.max() * dim as f64;
            let s = svd.solve(&rhs, tol).map_err(|e| Error::Solver(e.to_string()))?;
            (s, true)
        }
    };
    let z = sol.rows(0, n).into_owned();
    let objective = (c * &z - d).norm_squared();
    let residual = if me > 0 { (a_eq * &z - b_eq).amax() } else { 0.0 };
    Ok(LeastSquaresSolution { z, objective, residual, rank_deficient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn fixed_point_equality() {
        let p = QpProblem::new(dmatrix![2.0], dvector![0.0]).with_equalities(dmatrix![1.0], dvector![3.0]);
        let s = qp_solve(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 3.0).abs() < 1e-8);
        assert!((s.objective - 9.0).abs() < 1e-7);
    }

    #[test]
    fn symmetric_split() {
        let p = QpProblem::new(DMatrix::identity(2, 2) * 2.0, dvector![0.0, 0.0])
            .with_equalities(dmatrix![1.0, 1.0], dvector![1.0]);
        let s = qp_solve(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 0.5).abs() < 1e-8 && (s.z[1] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn box_constraint_active() {
        // min (z - 2)^2 with z <= 1
        let p = QpProblem::new(dmatrix![2.0], dvector![-4.0]).with_inequalities(
            dmatrix![1.0],
            dvector![f64::NEG_INFINITY],
            dvector![1.0],
        );
        let s = qp_solve(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 1.0).abs() < 1e-8);
        assert!(s.y_ineq[0] > 0.0);
    }

    #[test]
    fn infeasible_detected() {
        let p = QpProblem::new(dmatrix![1.0], dvector![0.0]).with_inequalities(
            dmatrix![1.0; 1.0],
            dvector![2.0, f64::NEG_INFINITY],
            dvector![f64::INFINITY, 1.0],
        );
        let s = qp_solve(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_bad_shapes_and_bounds() {
        let p = QpProblem::new(dmatrix![1.0], dvector![0.0, 1.0]);
        assert!(qp_solve(&p, &QpSettings::default()).is_err());
        let p =
            QpProblem::new(dmatrix![1.0], dvector![0.0]).with_inequalities(dmatrix![1.0], dvector![1.0], dvector![0.0]);
        assert!(qp_solve(&p, &QpSettings::default()).is_err());
        let p = QpProblem::new(dmatrix![-1.0], dvector![0.0]);
        assert!(qp_solve(&p, &QpSettings::default()).is_err());
    }

    #[test]
    fn least_squares_min_norm_point() {
        // min ||z||^2 s.t. z1 + 2 z2 = 5  ->  z = (1, 2)
        let s = qp_least_squares(&dmatrix![1.0, 2.0], &dvector![5.0], &DMatrix::identity(2, 2), &dvector![0.0, 0.0])
            .unwrap();
        assert!(!s.rank_deficient);
        assert!((s.z - dvector![1.0, 2.0]).amax() < 1e-12);
    }

    #[test]
    fn least_squares_unconstrained_normal_equations() {
        let c = dmatrix![1.0, 0.0; 1.0, 1.0; 0.0, 2.0];
        let d = dvector![1.0, 2.0, 3.0];
        let s = qp_least_squares(&DMatrix::zeros(0, 2), &DVector::zeros(0), &c, &d).unwrap();
        let normal = (c.transpose() * &c).lu().solve(&(c.transpose() * &d)).unwrap();
        assert!((s.z - normal).amax() < 1e-12);
    }

    #[test]
    fn least_squares_rank_deficient_flagged() {
        // second coordinate unconstrained and costless
        let s =
            qp_least_squares(&DMatrix::zeros(0, 2), &DVector::zeros(0), &dmatrix![1.0, 0.0], &dvector![2.0]).unwrap();
        assert!(s.rank_deficient);
        assert!((s.z - dvector![2.0, 0.0]).amax() < 1e-10);
    }
}

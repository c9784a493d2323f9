//! Closed-loop system responses, the nominal synthesis problem and a
//! Riccati reference solution.
//!
//! A response `(Phi_x, Phi_u)` maps the stacked disturbance
//! `w = [x0; W_0; ...; W_{T-2}]` to stacked states and inputs. It is
//! achievable by a causal controller exactly when
//! `(I - Z A0cal) Phi_x - Z B0cal Phi_u = I`, in which case the controller is
//! `K = Phi_u Phi_x^{-1}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blt::{blt_vec_layout, BltLayout, BltOperator};
use crate::error::{dim_err, Error, Result};
use crate::linalg::{check_pd, check_psd, check_square, matrix_from_nested, matrix_to_rows, psd_sqrt};
use crate::model::{MultNoiseSystem, StackedNominal};
use crate::qp::qp_least_squares;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResponse {
    pub phi_x: BltOperator,
    pub phi_u: BltOperator,
}

impl SystemResponse {
    pub fn horizon(&self) -> usize {
        self.phi_x.horizon()
    }

    pub fn n(&self) -> usize {
        self.phi_x.block_rows()
    }

    pub fn m(&self) -> usize {
        self.phi_u.block_rows()
    }

    fn check(&self) -> Result<()> {
        let (t, n) = (self.phi_x.horizon(), self.phi_x.block_rows());
        if self.phi_x.block_cols() != n || self.phi_u.horizon() != t || self.phi_u.block_cols() != n {
            return dim_err("phi_x must be n x n and phi_u m x n over the same horizon");
        }
        Ok(())
    }
}

/// Second-moment weight on the stacked disturbance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WSpec {
    /// A single disturbance realization; the weight is `w w'`.
    Fixed { w: Vec<f64> },
    /// `blkdiag(x0 x0', diag(noise_var), ..., diag(noise_var))`.
    Covariance { x0: Vec<f64>, noise_var: Vec<f64> },
    /// An explicit `nT x nT` PSD weight.
    Matrix { weight: Vec<Vec<f64>> },
}

impl WSpec {
    /// Covariance mode with unit additive-noise variances.
    pub fn with_unit_noise(x0: Vec<f64>) -> Self {
        let n = x0.len();
        WSpec::Covariance { x0, noise_var: vec![1.0; n] }
    }

    pub fn weight(&self, n: usize, horizon: usize) -> Result<DMatrix<f64>> {
        let dim = n * horizon;
        let w = match self {
            WSpec::Fixed { w } => {
                if w.len() != dim {
                    return dim_err(format!("fixed w has length {}, expected {dim}", w.len()));
                }
                let v = DVector::from_column_slice(w);
                &v * v.transpose()
            }
            WSpec::Covariance { x0, noise_var } => {
                if x0.len() != n || noise_var.len() != n {
                    return dim_err(format!("x0 and noise_var must have length {n}"));
                }
                if noise_var.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::Parameter {
                        name: "noise_var",
                        value: noise_var.iter().copied().fold(f64::NAN, f64::min),
                        range: "[0, inf)",
                    });
                }
                let v = DVector::from_column_slice(x0);
                let mut out = DMatrix::zeros(dim, dim);
                out.view_mut((0, 0), (n, n)).copy_from(&(&v * v.transpose()));
                for t in 1..horizon {
                    for j in 0..n {
                        out[(t * n + j, t * n + j)] = noise_var[j];
                    }
                }
                out
            }
            WSpec::Matrix { weight } => {
                let w = matrix_from_nested(weight)?;
                check_square("w_weight", &w, dim)?;
                check_psd("w_weight", &w)?;
                w
            }
        };
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CostDocument", into = "CostDocument")]
pub struct CostModel {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub w_spec: WSpec,
}

#[derive(Serialize, Deserialize)]
struct CostDocument {
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    w_spec: WSpec,
}

impl TryFrom<CostDocument> for CostModel {
    type Error = Error;
    fn try_from(doc: CostDocument) -> Result<Self> {
        CostModel::new(matrix_from_nested(&doc.q)?, matrix_from_nested(&doc.r)?, doc.w_spec)
    }
}

impl From<CostModel> for CostDocument {
    fn from(c: CostModel) -> Self {
        CostDocument { q: matrix_to_rows(&c.q), r: matrix_to_rows(&c.r), w_spec: c.w_spec }
    }
}

impl CostModel {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, w_spec: WSpec) -> Result<Self> {
        check_square("Q", &q, q.nrows())?;
        check_square("R", &r, r.nrows())?;
        check_psd("Q", &q)?;
        check_pd("R", &r)?;
        Ok(CostModel { q, r, w_spec })
    }

    fn check(&self, n: usize, m: usize) -> Result<()> {
        check_square("Q", &self.q, n)?;
        check_square("R", &self.r, m)
    }
}

pub fn affine_residual(resp: &SystemResponse, nom: &StackedNominal) -> Result<DMatrix<f64>> {
    resp.check()?;
    let n = resp.n();
    let lhs =
        BltOperator::identity(resp.horizon(), n).sub(&nom.za())?.mul(&resp.phi_x)?.sub(&nom.zb().mul(&resp.phi_u)?)?;
    Ok(lhs.sub(&BltOperator::identity(resp.horizon(), n))?.to_dense())
}

pub fn response_from_controller(k: &BltOperator, nom: &StackedNominal) -> Result<SystemResponse> {
    let phi_x = nom.closed_loop(k)?.inverse()?;
    let phi_u = k.mul(&phi_x)?;
    Ok(SystemResponse { phi_x, phi_u })
}

pub fn controller_from_response(resp: &SystemResponse) -> Result<BltOperator> {
    resp.check()?;
    resp.phi_u.mul(&resp.phi_x.inverse()?)
}

/// `tr(Qcal Phi_x W Phi_x') + tr(Rcal Phi_u W Phi_u')`, evaluated densely.
pub fn response_cost(resp: &SystemResponse, cost: &CostModel) -> Result<f64> {
    resp.check()?;
    let (horizon, n, m) = (resp.horizon(), resp.n(), resp.m());
    cost.check(n, m)?;
    let w = cost.w_spec.weight(n, horizon)?;
    let px = resp.phi_x.to_dense();
    let pu = resp.phi_u.to_dense();
    let qcal = crate::linalg::repeat_diag(&cost.q, horizon);
    let rcal = crate::linalg::repeat_diag(&cost.r, horizon);
    let jx = (&qcal * &px * &w * px.transpose()).trace();
    let ju = (&rcal * &pu * &w * pu.transpose()).trace();
    Ok(jx + ju)
}

/// Coordinates of a response as one vector: the `Phi_x` layout followed by
/// the `Phi_u` layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponseLayout {
    pub x: BltLayout,
    pub u: BltLayout,
}

impl ResponseLayout {
    pub fn new(horizon: usize, n: usize, m: usize) -> Self {
        ResponseLayout { x: blt_vec_layout(horizon, n, n), u: blt_vec_layout(horizon, m, n) }
    }

    pub fn len(&self) -> usize {
        self.x.len() + self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinate of `Phi_x` dense block `(t, s)`, entry `(r, c)`.
    pub fn x_index(&self, t: usize, s: usize, r: usize, c: usize) -> usize {
        self.x.index(t, t - s, r, c)
    }

    pub fn u_index(&self, t: usize, s: usize, r: usize, c: usize) -> usize {
        self.x.len() + self.u.index(t, t - s, r, c)
    }

    pub fn flatten(&self, resp: &SystemResponse) -> DVector<f64> {
        let mut v = DVector::zeros(self.len());
        v.rows_mut(0, self.x.len()).copy_from(&self.x.flatten(&resp.phi_x));
        v.rows_mut(self.x.len(), self.u.len()).copy_from(&self.u.flatten(&resp.phi_u));
        v
    }

    pub fn unflatten(&self, v: &[f64]) -> Result<SystemResponse> {
        if v.len() != self.len() {
            return dim_err("response vector has wrong length");
        }
        let lx = self.x.len();
        Ok(SystemResponse { phi_x: self.x.unflatten(&v[..lx])?, phi_u: self.u.unflatten(&v[lx..])? })
    }
}

/// Matrix `H` with `response_cost = z' H z` for `z` in [`ResponseLayout`]
/// coordinates.
pub fn cost_hessian(cost: &CostModel, n: usize, m: usize, horizon: usize) -> Result<DMatrix<f64>> {
    cost.check(n, m)?;
    let w = cost.w_spec.weight(n, horizon)?;
    let lay = ResponseLayout::new(horizon, n, m);
    let mut h = DMatrix::zeros(lay.len(), lay.len());
    for t in 0..horizon {
        for s in 0..=t {
            for s2 in 0..=t {
                for c in 0..n {
                    for c2 in 0..n {
                        let wv = w[(s * n + c, s2 * n + c2)];
                        if wv == 0.0 {
                            continue;
                        }
                        for r in 0..n {
                            for r2 in 0..n {
                                h[(lay.x_index(t, s, r, c), lay.x_index(t, s2, r2, c2))] += cost.q[(r, r2)] * wv;
                            }
                        }
                        for r in 0..m {
                            for r2 in 0..m {
                                h[(lay.u_index(t, s, r, c), lay.u_index(t, s2, r2, c2))] += cost.r[(r, r2)] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(h)
}

/// Achievability constraint `A z = b` in [`ResponseLayout`] coordinates. Row
/// `(t, s, r, c)` is entry `(r, c)` of block `(t, s)`.
pub fn affine_constraint(sys: &MultNoiseSystem, horizon: usize) -> (DMatrix<f64>, DVector<f64>) {
    let (n, m) = (sys.n(), sys.m());
    let lay = ResponseLayout::new(horizon, n, m);
    let rows = lay.x.len();
    let mut a = DMatrix::zeros(rows, lay.len());
    let mut b = DVector::zeros(rows);
    for t in 0..horizon {
        for s in 0..=t {
            for r in 0..n {
                for c in 0..n {
                    let row = lay.x_index(t, s, r, c);
                    a[(row, row)] = 1.0;
                    if t == s && r == c {
                        b[row] = 1.0;
                    }
                    if t > s {
                        for k in 0..n {
                            a[(row, lay.x_index(t - 1, s, k, c))] -= sys.a0[(r, k)];
                        }
                        for k in 0..m {
                            a[(row, lay.u_index(t - 1, s, k, c))] -= sys.b0[(r, k)];
                        }
                    }
                }
            }
        }
    }
    (a, b)
}

/// Groups of block columns that the weight couples.
fn column_groups(w: &DMatrix<f64>, n: usize, horizon: usize) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..horizon).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut i = i;
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for s in 0..horizon {
        for s2 in 0..s {
            if w.view((s * n, s2 * n), (n, n)).amax() != 0.0 {
                let (a, b) = (find(&mut parent, s), find(&mut parent, s2));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_of = vec![usize::MAX; horizon];
    for s in 0..horizon {
        let r = find(&mut parent, s);
        if root_of[r] == usize::MAX {
            root_of[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[root_of[r]].push(s);
    }
    groups
}

#[derive(Debug, Clone, PartialEq)]
pub struct NominalSolution {
    pub response: SystemResponse,
    pub objective: f64,
    /// Some columns of the response were not pinned down by the cost.
    pub rank_deficient: bool,
}

/// Minimizes the weighted response cost over the achievable subspace.
///
/// Block columns of the response that the weight does not couple are
/// independent subproblems and are solved separately. Columns with zero
/// weight get the open-loop response (`Phi_u = 0`).
pub fn nominal_sls_solve(sys: &MultNoiseSystem, cost: &CostModel, horizon: usize) -> Result<NominalSolution> {
    if horizon == 0 {
        return dim_err("horizon must be positive");
    }
    let (n, m) = (sys.n(), sys.m());
    let lay = ResponseLayout::new(horizon, n, m);
    let h = cost_hessian(cost, n, m, horizon)?;
    let w = cost.w_spec.weight(n, horizon)?;
    let (a_full, b_full) = affine_constraint(sys, horizon);
    let mut z = DVector::zeros(lay.len());
    let mut rank_deficient = false;

    for group in column_groups(&w, n, horizon) {
        let in_group = |s: usize| group.contains(&s);
        let mut vars = Vec::new();
        let mut rows = Vec::new();
        for t in 0..horizon {
            for s in (0..=t).filter(|&s| in_group(s)) {
                for r in 0..n {
                    for c in 0..n {
                        vars.push(lay.x_index(t, s, r, c));
                        rows.push(lay.x_index(t, s, r, c));
                    }
                }
                for r in 0..m {
                    for c in 0..n {
                        vars.push(lay.u_index(t, s, r, c));
                    }
                }
            }
        }
        let hg = DMatrix::from_fn(vars.len(), vars.len(), |i, j| h[(vars[i], vars[j])]);
        let ag = DMatrix::from_fn(rows.len(), vars.len(), |i, j| a_full[(rows[i], vars[j])]);
        let bg = DVector::from_fn(rows.len(), |i, _| b_full[rows[i]]);

        let zg = if hg.amax() == 0.0 {
            rank_deficient = true;
            // Phi_u = 0; Phi_x follows from the constraint by forward substitution.
            let mut zg = DVector::zeros(vars.len());
            let pos: std::collections::HashMap<usize, usize> = vars.iter().enumerate().map(|(i, &v)| (v, i)).collect();
            for (i, &row) in rows.iter().enumerate() {
                let col = pos[&row];
                let mut acc = bg[i];
                for j in 0..vars.len() {
                    if j != col {
                        acc -= ag[(i, j)] * zg[j];
                    }
                }
                zg[col] = acc;
            }
            zg
        } else {
            let c = psd_sqrt(&hg);
            let sol = qp_least_squares(&ag, &bg, &c, &DVector::zeros(vars.len()))?;
            if sol.residual > 1e-8 {
                return Err(Error::Solver(format!(
                    "nominal least-squares solve left constraint residual {:.3e}",
                    sol.residual
                )));
            }
            rank_deficient |= sol.rank_deficient;
            sol.z
        };
        for (i, &v) in vars.iter().enumerate() {
            z[v] = zg[i];
        }
    }
    let response = lay.unflatten(z.as_slice())?;
    let objective = z.dot(&(&h * &z));
    Ok(NominalSolution { response, objective, rank_deficient })
}

/// Finite-horizon LQR with `P_T = 0` and `u_t = K_t x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    /// `K_0 .. K_{T-1}`.
    pub gains: Vec<DMatrix<f64>>,
    /// `P_0 .. P_T`.
    pub p: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    pub fn cost(&self, x0: &DVector<f64>) -> f64 {
        x0.dot(&(&self.p[0] * x0))
    }

    /// Expected cost with `x0 x0'` replaced by the first diagonal block of
    /// `w_blocks` and `W_{t-1}` having covariance `w_blocks[t]`.
    pub fn expected_cost(&self, w_blocks: &[DMatrix<f64>]) -> f64 {
        w_blocks.iter().zip(&self.p).map(|(w, p)| (p * w).trace()).sum()
    }

    /// The gains as a block-diagonal (memoryless) controller.
    pub fn controller(&self) -> BltOperator {
        BltOperator::block_diagonal(&self.gains).expect("uniform gain shapes")
    }
}

pub fn riccati_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    horizon: usize,
) -> Result<RiccatiSolution> {
    let (n, m) = (a.nrows(), b.ncols());
    check_square("A", a, n)?;
    if b.nrows() != n {
        return dim_err("B must have as many rows as A");
    }
    check_square("Q", q, n)?;
    check_square("R", r, m)?;
    if horizon == 0 {
        return dim_err("horizon must be positive");
    }
    let mut p = vec![DMatrix::zeros(n, n); horizon + 1];
    let mut gains = vec![DMatrix::zeros(m, n); horizon];
    for t in (0..horizon).rev() {
        let pn = &p[t + 1];
        let btp = b.transpose() * pn;
        let s = r + &btp * b;
        let k = -s.lu().solve(&(&btp * a)).ok_or(Error::SingularBlock { index: t, condition: f64::INFINITY })?;
        let pt = q + a.transpose() * pn * a + a.transpose() * pn * b * &k;
        p[t] = (&pt + pt.transpose()) * 0.5;
        gains[t] = k;
    }
    Ok(RiccatiSolution { gains, p })
}

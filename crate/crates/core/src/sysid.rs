//! Identification of a multiplicative-noise model from one state-input
//! trajectory of an additive-noise linear system.
//!
//! With `D = [U; X_-]` and a right inverse `D V = I` split as `V = [V1 V2]`
//! (`V1` has `m` columns, `V2` has `n`), the nominal estimate is
//! `B0 = X_+ V1`, `A0 = X_+ V2`. The noise term `W V` is represented by one
//! multiplicative direction per state: `A_i` has its only nonzero row at `i`,
//! equal to the column sums of `V2`, `B_i` likewise from `V1`, and the scale
//! of direction `i` is `sqrt(alpha_i)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};
use crate::model::{DeltaDist, MultNoiseSystem};

#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch {
    /// `n x (T+1)`, columns `x_0 .. x_T`.
    pub x: DMatrix<f64>,
    /// `m x T`, columns `u_0 .. u_{T-1}`.
    pub u: DMatrix<f64>,
    /// Additive-noise variances, one per state.
    pub alpha: Vec<f64>,
}

impl DataBatch {
    pub fn new(x: DMatrix<f64>, u: DMatrix<f64>, alpha: Vec<f64>) -> Result<Self> {
        let batch = DataBatch { x, u, alpha };
        batch.check()?;
        Ok(batch)
    }

    fn check(&self) -> Result<()> {
        if self.x.ncols() != self.u.ncols() + 1 {
            return dim_err(format!(
                "X has {} columns and U has {}; expected X to have one more",
                self.x.ncols(),
                self.u.ncols()
            ));
        }
        if self.alpha.len() != self.n() {
            return dim_err(format!("alpha has length {}, expected {}", self.alpha.len(), self.n()));
        }
        if self.alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Parameter { name: "alpha", value: f64::NAN, range: "[0, inf)" });
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_minus(&self) -> DMatrix<f64> {
        self.x.columns(0, self.len()).into_owned()
    }

    pub fn x_plus(&self) -> DMatrix<f64> {
        self.x.columns(1, self.len()).into_owned()
    }

    /// `[U; X_-]`.
    pub fn data_matrix(&self) -> DMatrix<f64> {
        let (n, m, t) = (self.n(), self.m(), self.len());
        let mut d = DMatrix::zeros(m + n, t);
        d.view_mut((0, 0), (m, t)).copy_from(&self.u);
        d.view_mut((m, 0), (n, t)).copy_from(&self.x_minus());
        d
    }

    /// Reads `t, x_1..x_n, u_1..u_m` rows; the inputs on the last row are empty.
    pub fn read_csv(path: impl AsRef<Path>, alpha: Vec<f64>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let n = headers.iter().filter(|h| h.starts_with("x_")).count();
        let m = headers.iter().filter(|h| h.starts_with("u_")).count();
        let col = |name: String| {
            headers.iter().position(|h| h == name).ok_or_else(|| Error::Data(format!("missing column {name}")))
        };
        let x_cols: Vec<usize> = (1..=n).map(|i| col(format!("x_{i}"))).collect::<Result<_>>()?;
        let u_cols: Vec<usize> = (1..=m).map(|i| col(format!("u_{i}"))).collect::<Result<_>>()?;
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut us: Vec<Option<Vec<f64>>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |i: usize| -> Result<Option<f64>> {
                let s = rec.get(i).unwrap_or("").trim();
                if s.is_empty() {
                    return Ok(None);
                }
                s.parse::<f64>().map(Some).map_err(|e| Error::Data(format!("row {}: {e}", line + 1)))
            };
            let x: Vec<f64> = x_cols
                .iter()
                .map(|&i| parse(i)?.ok_or_else(|| Error::Data(format!("row {}: missing state", line + 1))))
                .collect::<Result<_>>()?;
            let u: Vec<Option<f64>> = u_cols.iter().map(|&i| parse(i)).collect::<Result<_>>()?;
            let u = if u.iter().all(Option::is_some) && m > 0 {
                Some(u.into_iter().map(Option::unwrap).collect())
            } else if u.iter().all(Option::is_none) {
                None
            } else {
                return Err(Error::Data(format!("row {}: partially missing input", line + 1)));
            };
            xs.push(x);
            us.push(u);
        }
        if xs.len() < 2 {
            return Err(Error::Data("need at least two rows".into()));
        }
        let t = xs.len() - 1;
        if m > 0 && (us[..t].iter().any(Option::is_none) || us[t].is_some()) {
            return Err(Error::Data("inputs must be present on every row except the last".into()));
        }
        let x = DMatrix::from_fn(n, t + 1, |i, j| xs[j][i]);
        let u = DMatrix::from_fn(m, t, |i, j| us[j].as_ref().unwrap()[i]);
        DataBatch::new(x, u, alpha)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n()).map(|i| format!("x_{i}")));
        header.extend((1..=self.m()).map(|i| format!("u_{i}")));
        w.write_record(&header)?;
        for t in 0..=self.len() {
            let mut rec = vec![t.to_string()];
            rec.extend(self.x.column(t).iter().map(|v| v.to_string()));
            if t < self.len() {
                rec.extend(self.u.column(t).iter().map(|v| v.to_string()));
            } else {
                rec.extend(std::iter::repeat_n(String::new(), self.m()));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCheck {
    pub ok: bool,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Full row rank test of `[U; X_-]` with tolerance `1e-8 sigma_max`.
pub fn data_rank_ok(batch: &DataBatch) -> RankCheck {
    let d = batch.data_matrix();
    let rows = d.nrows();
    if batch.len() < rows || rows == 0 {
        return RankCheck { ok: false, sigma_min: 0.0, sigma_max: 0.0 };
    }
    let sv = d.singular_values();
    let sigma_max = sv.max();
    let sigma_min = sv.min();
    RankCheck { ok: sigma_max > 0.0 && sigma_min > 1e-8 * sigma_max, sigma_min, sigma_max }
}

/// Minimum-norm right inverse of `[U; X_-]`, split as `(V1, V2)`.
pub fn right_inverse(batch: &DataBatch) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let rank = data_rank_ok(batch);
    if !rank.ok {
        return Err(Error::RankDeficient { sigma_min: rank.sigma_min, tolerance: 1e-8 * rank.sigma_max });
    }
    let d = batch.data_matrix();
    // D' (D D')^{-1}
    let gram = &d * d.transpose();
    let chol =
        gram.cholesky().ok_or(Error::RankDeficient { sigma_min: rank.sigma_min, tolerance: 1e-8 * rank.sigma_max })?;
    let v = chol.solve(&d).transpose();
    let m = batch.m();
    Ok((v.columns(0, m).into_owned(), v.columns(m, batch.n()).into_owned()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IdentifyOptions {
    /// Replace the given `alpha` by the sample variance of each residual row.
    pub estimate_alpha: bool,
}

pub fn identify(batch: &DataBatch) -> Result<MultNoiseSystem> {
    identify_with(batch, IdentifyOptions::default())
}

pub fn identify_with(batch: &DataBatch, opts: IdentifyOptions) -> Result<MultNoiseSystem> {
    batch.check()?;
    let (n, m) = (batch.n(), batch.m());
    let (v1, v2) = right_inverse(batch)?;
    let xp = batch.x_plus();
    let a0 = &xp * &v2;
    let b0 = &xp * &v1;
    let sums_a = v2.row_sum();
    let sums_b = v1.row_sum();
    let mut a_dirs = Vec::with_capacity(n);
    let mut b_dirs = Vec::with_capacity(n);
    for i in 0..n {
        let mut ai = DMatrix::zeros(n, n);
        ai.row_mut(i).copy_from(&sums_a);
        let mut bi = DMatrix::zeros(n, m);
        bi.row_mut(i).copy_from(&sums_b);
        a_dirs.push(ai);
        b_dirs.push(bi);
    }
    let alpha =
        if opts.estimate_alpha { residual_variances(&residual_check(batch, &a0, &b0)?) } else { batch.alpha.clone() };
    let sigma = alpha.iter().map(|a| a.sqrt()).collect();
    MultNoiseSystem::new(a0, b0, a_dirs, b_dirs, sigma, DeltaDist::Gaussian, vec![0.0; n])
}

/// `X_+ - A0 X_- - B0 U`.
pub fn residual_check(batch: &DataBatch, a0: &DMatrix<f64>, b0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = (batch.n(), batch.m());
    if a0.shape() != (n, n) || b0.shape() != (n, m) {
        return dim_err("A0 or B0 does not match the batch dimensions");
    }
    Ok(batch.x_plus() - a0 * batch.x_minus() - b0 * &batch.u)
}

fn residual_variances(res: &DMatrix<f64>) -> Vec<f64> {
    let t = res.ncols();
    (0..res.nrows())
        .map(|i| {
            if t < 2 {
                return 0.0;
            }
            let row = res.row(i);
            let mean = row.mean();
            row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1) as f64
        })
        .collect()
}

/// Simulates `x_{t+1} = A x_t + B u_t + w_t` for the given input and noise
/// columns.
pub fn simulate_batch(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x0: &DVector<f64>,
    u: &DMatrix<f64>,
    w: &DMatrix<f64>,
    alpha: Vec<f64>,
) -> Result<DataBatch> {
    let t = u.ncols();
    if w.shape() != (a.nrows(), t) || x0.len() != a.nrows() || b.ncols() != u.nrows() {
        return dim_err("simulate_batch: inconsistent dimensions");
    }
    let mut x = DMatrix::zeros(a.nrows(), t + 1);
    x.set_column(0, x0);
    for k in 0..t {
        let next = a * x.column(k) + b * u.column(k) + w.column(k);
        x.set_column(k + 1, &next);
    }
    DataBatch::new(x, u.clone(), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn scalar_batch() -> DataBatch {
        let u = dmatrix![1.0, -0.5, 0.3, 2.0, -1.0];
        simulate_batch(&dmatrix![0.8], &dmatrix![0.5], &dvector![1.0], &u, &DMatrix::zeros(1, 5), vec![0.1]).unwrap()
    }

    #[test]
    fn scalar_noise_free_recovers_parameters() {
        let sys = identify(&scalar_batch()).unwrap();
        assert!((sys.a0[(0, 0)] - 0.8).abs() < 1e-10);
        assert!((sys.b0[(0, 0)] - 0.5).abs() < 1e-10);
        assert!((sys.sigma[0] - 0.1f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn right_inverse_identity_and_direction_structure() {
        let batch = scalar_batch();
        let (v1, v2) = right_inverse(&batch).unwrap();
        let mut v = DMatrix::zeros(5, 2);
        v.set_column(0, &v1.column(0));
        v.set_column(1, &v2.column(0));
        assert!((batch.data_matrix() * v - DMatrix::<f64>::identity(2, 2)).amax() < 1e-10);
        let sys = identify(&batch).unwrap();
        assert!((sys.a_dirs[0][(0, 0)] - v2.sum()).abs() < 1e-14);
        assert!((sys.b_dirs[0][(0, 0)] - v1.sum()).abs() < 1e-14);
    }

    #[test]
    fn rank_deficiency() {
        let batch = DataBatch::new(DMatrix::zeros(1, 6), DMatrix::zeros(1, 5), vec![0.0]).unwrap();
        assert!(!data_rank_ok(&batch).ok);
        assert!(matches!(identify(&batch), Err(Error::RankDeficient { .. })));
        let dup = DataBatch::new(dmatrix![1.0, 1.0, 1.0, 1.0], dmatrix![2.0, 2.0, 2.0], vec![0.0]).unwrap();
        assert!(!data_rank_ok(&dup).ok);
    }

    #[test]
    fn residual_is_zero_for_true_parameters() {
        let res = residual_check(&scalar_batch(), &dmatrix![0.8], &dmatrix![0.5]).unwrap();
        assert!(res.amax() < 1e-14);
    }

    #[test]
    fn estimated_alpha_from_residual() {
        let batch = scalar_batch();
        let sys = identify_with(&batch, IdentifyOptions { estimate_alpha: true }).unwrap();
        assert!(sys.sigma[0] < 1e-7);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.csv");
        let batch = scalar_batch();
        batch.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,x_1,u_1\n"));
        assert!(text.trim_end().ends_with(','));
        let back = DataBatch::read_csv(&path, vec![0.1]).unwrap();
        assert_eq!(back, batch);
    }

    #[test]
    fn csv_rejects_missing_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "t,x_1,u_1\n0,1.0,\n1,0.8,0.1\n2,0.5,\n").unwrap();
        assert!(DataBatch::read_csv(&path, vec![0.0]).is_err());
    }
}

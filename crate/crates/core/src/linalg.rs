//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{dim_err, Error, Result};

pub fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return dim_err(format!("expected a {nrows}x{ncols} nested array"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Like [`matrix_from_rows`] but infers the shape from the data.
pub fn matrix_from_nested(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    matrix_from_rows(rows, nrows, ncols)
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Square root of a symmetric PSD matrix; eigenvalues below zero are clipped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn check_square(name: &'static str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return dim_err(format!("{name} is {}x{}, expected {n}x{n}", m.nrows(), m.ncols()));
    }
    Ok(())
}

pub fn check_symmetric(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Definiteness { name, property: "symmetric" });
    }
    Ok(())
}

/// Q must be symmetric with eigenvalues >= -1e-10.
pub fn check_psd(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    check_symmetric(name, m)?;
    if min_eigenvalue(m) < -1e-10 {
        return Err(Error::Definiteness { name, property: "positive semidefinite" });
    }
    Ok(())
}

/// R must be symmetric with eigenvalues > 1e-12.
pub fn check_pd(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    check_symmetric(name, m)?;
    if min_eigenvalue(m) <= 1e-12 {
        return Err(Error::Definiteness { name, property: "positive definite" });
    }
    Ok(())
}

/// Block diagonal matrix `I_count (x) m`.
pub fn repeat_diag(m: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    kron(&DMatrix::identity(count, count), m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn sqrt_squares_back() {
        let m = dmatrix![4.0, 1.0; 1.0, 3.0];
        let s = psd_sqrt(&m);
        assert!((&s * &s - m).amax() < 1e-12);
    }

    #[test]
    fn sqrt_clips_negative_noise() {
        let m = dmatrix![1.0, 0.0; 0.0, -1e-14];
        let s = psd_sqrt(&m);
        assert!((s[(1, 1)]).abs() < 1e-12);
    }

    #[test]
    fn definiteness_checks() {
        assert!(check_psd("Q", &dmatrix![1.0, 0.0; 0.0, 0.0]).is_ok());
        assert!(check_psd("Q", &dmatrix![1.0, 0.0; 0.0, -1.0]).is_err());
        assert!(check_pd("R", &dmatrix![1.0, 0.0; 0.0, 0.0]).is_err());
        assert!(check_pd("R", &dmatrix![1.0, 2.0; 0.0, 1.0]).is_err());
    }
}

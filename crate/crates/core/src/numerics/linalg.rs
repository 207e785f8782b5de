use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Returns `(a + aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetrize(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Cholesky factor of a symmetric matrix. When the first attempt fails the
/// diagonal is bumped by `pd_floor` once before giving up.
pub fn cholesky_with_jitter(a: &DMatrix<f64>, pd_floor: f64) -> Result<Cholesky<f64, Dyn>> {
    if !a.is_square() {
        return Err(Error::InvalidArgument(format!(
            "Cholesky needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol);
    }
    let n = a.nrows();
    let jittered = a + DMatrix::<f64>::identity(n, n) * pd_floor;
    jittered
        .cholesky()
        .ok_or_else(|| Error::Numeric("matrix is not positive definite after jitter".into()))
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: matrix is {}x{}, right-hand side has length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let chol = cholesky_with_jitter(a, crate::DEFAULT_PD_FLOOR)?;
    Ok(chol.solve(b))
}

/// Least-squares coefficients, minimal-norm when the design is rank deficient.
#[derive(Debug, Clone)]
pub struct LeastSquaresFit {
    pub coefficients: DVector<f64>,
    pub rank: usize,
    pub rank_deficient: bool,
}

pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<LeastSquaresFit> {
    if x.ncols() == 0 {
        return Err(Error::InvalidArgument("design matrix has no columns".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: design has {} rows, response has length {}",
            x.nrows(),
            y.len()
        )));
    }
    let svd = x.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let tol = sigma_max * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let coefficients = svd
        .solve(y, tol)
        .map_err(|e| Error::Numeric(format!("least squares solve failed: {e}")))?;
    Ok(LeastSquaresFit {
        coefficients,
        rank,
        rank_deficient: rank < x.ncols(),
    })
}

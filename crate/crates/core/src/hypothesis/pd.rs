use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numerics::linalg::symmetrize;

/// Closest matrix (Frobenius) with eigenvalues at least `pd_floor`, found by
/// clipping the spectrum of the symmetric part. Matrices that already clear
/// the floor come back symmetrized and otherwise unchanged.
pub fn nearest_pd(a: &DMatrix<f64>, pd_floor: f64) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::InvalidArgument(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if !(pd_floor >= 0.0 && pd_floor.is_finite()) {
        return Err(Error::InvalidArgument(format!("pd_floor {pd_floor} must be finite and nonnegative")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let sym = symmetrize(a);
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= pd_floor) {
        return Ok(sym);
    }
    let clipped = eig.eigenvalues.map(|l| l.max(pd_floor));
    let v = &eig.eigenvectors;
    let mut out = symmetrize(&(v * DMatrix::from_diagonal(&clipped) * v.transpose()));
    // reconstruction rounding can leave the smallest eigenvalue a hair below the floor
    let n = out.nrows();
    for _ in 0..8 {
        let min = out.symmetric_eigenvalues().min();
        if min >= pd_floor {
            return Ok(out);
        }
        let bump = (pd_floor - min).max(f64::EPSILON * out.amax());
        out += DMatrix::<f64>::identity(n, n) * bump;
    }
    if out.symmetric_eigenvalues().min() >= pd_floor {
        Ok(out)
    } else {
        Err(Error::Numeric("positive-definite repair did not converge".into()))
    }
}

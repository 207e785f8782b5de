use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ExperimentDataset;
use crate::error::{Error, Result};
use crate::estimator::{check_cells, check_compatible, variance_components};
use crate::grouping::GroupAssignment;
use crate::hypothesis::pd::nearest_pd;
use crate::numerics::linalg::symmetrize;

/// Square `k x k` matrix from row-major entries.
pub fn matrix_from_rows(k: usize, values: Vec<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(k, k, &values)
}

/// Covariance estimate of a GATES vector, ready for inversion.
///
/// `raw` is the symmetrized plug-in estimate. `sigma` is the matrix the tests
/// invert: for estimates of a centered vector (entries summing to zero) it is
/// the raw matrix compressed onto contrasts, plus an arbitrary positive
/// variance along the all-ones direction, then repaired if still not PD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovMatrix {
    pub raw: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub repaired: bool,
    /// The vector this matrix describes is known to sum to zero.
    pub centered: bool,
    pub pd_floor: f64,
}

impl CovMatrix {
    /// Wraps a user-supplied covariance of an unconstrained vector.
    pub fn from_matrix(m: DMatrix<f64>, pd_floor: f64) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "covariance must be square and nonempty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let raw = symmetrize(&m);
        let sigma = nearest_pd(&raw, pd_floor)?;
        Ok(CovMatrix {
            repaired: sigma != raw,
            raw,
            sigma,
            centered: false,
            pd_floor,
        })
    }

    /// Wraps the estimated covariance of a centered vector.
    pub fn for_centered(m: DMatrix<f64>, pd_floor: f64) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "covariance must be square and nonempty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let raw = symmetrize(&m);
        let k = raw.nrows();
        let kf = k as f64;
        let ones = DMatrix::from_element(k, k, 1.0 / kf);
        let proj = DMatrix::<f64>::identity(k, k) - &ones;
        let compressed = symmetrize(&(&proj * &raw * &proj));
        let along_ones = if k > 1 { compressed.trace() / (kf - 1.0) } else { raw[(0, 0)] };
        let candidate = compressed + ones * along_ones.max(0.0);
        let sigma = nearest_pd(&candidate, pd_floor)?;
        Ok(CovMatrix {
            repaired: sigma != candidate,
            raw,
            sigma,
            centered: true,
            pd_floor,
        })
    }

    pub fn dim(&self) -> usize {
        self.raw.nrows()
    }

    /// Degrees of freedom of the chi-squared reference.
    pub fn df(&self) -> usize {
        if self.centered && self.dim() > 1 {
            self.dim() - 1
        } else {
            self.dim()
        }
    }

    /// `xᵀ Σ⁻¹ x` using the inversion matrix.
    pub fn quadratic_form(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "vector of length {} against a {}x{} covariance",
                x.len(),
                self.dim(),
                self.dim()
            )));
        }
        let chol = self
            .sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("covariance is singular after repair".into()))?;
        let v = DVector::from_column_slice(x);
        let z = chol.l().solve_lower_triangular(&v).ok_or_else(|| Error::Numeric("triangular solve failed".into()))?;
        Ok(z.norm_squared())
    }
}

/// Plug-in covariance of the centered GATES vector `τ̂_k − τ̂`.
pub fn sigma_entries(d: &ExperimentDataset, g: &GroupAssignment) -> Result<DMatrix<f64>> {
    check_compatible(d, g)?;
    check_cells(d, g, 2)?;
    let comp = variance_components(d, g)?;
    let k = g.k;
    let kf = k as f64;
    let n = d.n() as f64;
    let (n1, n0) = (d.n1() as f64, d.n0() as f64);
    let s1 = centered_cross_moments(d, g, true);
    let s0 = centered_cross_moments(d, g, false);
    let (k1, k0) = (&comp.kappa_1, &comp.kappa_0);
    Ok(DMatrix::from_fn(k, k, |a, b| {
        kf * kf * (s1[(a, b)] / n1 + s0[(a, b)] / n0)
            + (kf - 1.0) / (kf * (n - 1.0))
                * (k1[a] * k1[a] - k1[a] * k0[a] + k1[b] * k1[b] - k1[b] * k0[b] - kf * k1[a] * k1[b])
    }))
}

/// Within-arm sample covariance (divisor `n_t − 1`) of `(1{g=k} − 1/K) Y`.
pub(crate) fn centered_cross_moments(d: &ExperimentDataset, g: &GroupAssignment, arm: bool) -> DMatrix<f64> {
    let k = g.k;
    let inv_k = 1.0 / k as f64;
    let rows: Vec<usize> = (0..d.n()).filter(|&i| d.treated()[i] == arm).collect();
    let z = DMatrix::from_fn(rows.len(), k, |r, j| {
        let i = rows[r];
        let f = if g.index_of(i) == j { 1.0 } else { 0.0 };
        (f - inv_k) * d.y()[i]
    });
    let mean = z.row_mean();
    let mut centered = z;
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let denom = (rows.len().max(2) - 1) as f64;
    symmetrize(&(centered.transpose() * centered / denom))
}

pub fn build_sigma(d: &ExperimentDataset, g: &GroupAssignment) -> Result<CovMatrix> {
    build_sigma_with_floor(d, g, crate::DEFAULT_PD_FLOOR)
}

pub fn build_sigma_with_floor(d: &ExperimentDataset, g: &GroupAssignment, pd_floor: f64) -> Result<CovMatrix> {
    CovMatrix::for_centered(sigma_entries(d, g)?, pd_floor)
}

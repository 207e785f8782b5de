//! Heterogeneity and rank-consistency tests on a GATES vector.

mod isotonic;
mod pd;
mod sigma;

pub use isotonic::isotonic_projection;
pub use pd::nearest_pd;
pub use sigma::{build_sigma, build_sigma_with_floor, matrix_from_rows, sigma_entries, CovMatrix};
pub(crate) use sigma::centered_cross_moments;

use nalgebra::DVector;
use rayon::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{chi2_sf, RngStream};

/// Monte Carlo draws per stream in the rank test.
const MC_BLOCK: usize = 1024;

pub const MIN_RANK_TEST_DRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    ChiSquare { df: usize },
    ChiBarMonteCarlo { draws: usize, std_error: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub reference: Reference,
    pub method: String,
}

fn centered(tau_hat: &[f64], ate_hat: f64, sigma: &CovMatrix) -> Result<Vec<f64>> {
    if tau_hat.len() != sigma.dim() {
        return Err(Error::InvalidArgument(format!(
            "{} group estimates against a {}x{} covariance",
            tau_hat.len(),
            sigma.dim(),
            sigma.dim()
        )));
    }
    if !ate_hat.is_finite() || tau_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("estimates must be finite".into()));
    }
    Ok(tau_hat.iter().map(|t| t - ate_hat).collect())
}

/// Wald test that every group effect equals the overall effect.
pub fn het_test(tau_hat: &[f64], ate_hat: f64, sigma: &CovMatrix) -> Result<TestResult> {
    let c = centered(tau_hat, ate_hat, sigma)?;
    let statistic = sigma.quadratic_form(&c)?;
    let df = sigma.df();
    Ok(TestResult {
        statistic,
        p_value: chi2_sf(statistic, df)?,
        reference: Reference::ChiSquare { df },
        method: "heterogeneity".into(),
    })
}

fn rank_statistic(chol_l: &nalgebra::DMatrix<f64>, x: &[f64]) -> f64 {
    let fit = isotonic_projection(x);
    let r = DVector::from_iterator(x.len(), x.iter().zip(&fit).map(|(a, b)| a - b));
    chol_l
        .solve_lower_triangular(&r)
        .map_or(f64::INFINITY, |z| z.norm_squared())
}

/// Test that group effects are nondecreasing in the score, calibrated by
/// Monte Carlo at the least favourable null (all effects equal).
///
/// Draw blocks use independent streams of `seed`, so the p-value does not
/// depend on how rayon schedules them.
pub fn rank_test(tau_hat: &[f64], ate_hat: f64, sigma: &CovMatrix, n_mc: usize, seed: u64) -> Result<TestResult> {
    if n_mc < MIN_RANK_TEST_DRAWS {
        return Err(Error::InvalidArgument(format!(
            "rank test needs at least {MIN_RANK_TEST_DRAWS} Monte Carlo draws, got {n_mc}"
        )));
    }
    let c = centered(tau_hat, ate_hat, sigma)?;
    let chol = sigma
        .sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("covariance is singular after repair".into()))?;
    let l = chol.l();
    let statistic = rank_statistic(&l, &c);
    let k = c.len();
    let blocks = n_mc.div_ceil(MC_BLOCK);
    let exceed: usize = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let count = MC_BLOCK.min(n_mc - b * MC_BLOCK);
            let mut rng = RngStream::new(seed, b as u64).rng();
            let mut z = DVector::<f64>::zeros(k);
            let mut hits = 0usize;
            for _ in 0..count {
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                let x = &l * &z;
                if rank_statistic(&l, x.as_slice()) >= statistic {
                    hits += 1;
                }
            }
            hits
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    let p = exceed as f64 / n_mc as f64;
    Ok(TestResult {
        statistic,
        p_value: p,
        reference: Reference::ChiBarMonteCarlo {
            draws: n_mc,
            std_error: (p * (1.0 - p) / n_mc as f64).sqrt(),
        },
        method: "rank_consistency".into(),
    })
}

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::floor_variances;
use crate::hypothesis::CovMatrix;

use super::FoldEstimate;

/// Fold-level sizes shared by every fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldShape {
    pub k: usize,
    pub m1: usize,
    pub m0: usize,
}

impl FoldShape {
    fn m(&self) -> usize {
        self.m1 + self.m0
    }
}

/// Cross-fit variance per group with its ingredients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFitVariance {
    pub variance: Vec<f64>,
    pub raw: Vec<f64>,
    pub floored: Vec<bool>,
    /// Realized across-fold variance of the fold estimates.
    pub s2_fk_raw: Vec<f64>,
    /// Conservative plug-in actually used for the fold-spread term.
    pub s2_fk_used: Vec<f64>,
    /// Fold-averaged within-arm second moments.
    pub e_s2_1: Vec<f64>,
    pub e_s2_0: Vec<f64>,
    pub e_kappa_sq: Vec<f64>,
    pub v_kappa: Vec<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    s / c as f64
}

/// Sample covariance with divisor `len − 1`; zero for a single value.
fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let l = a.len();
    if l < 2 {
        return 0.0;
    }
    let (ma, mb) = (mean(a.iter().copied()), mean(b.iter().copied()));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (l - 1) as f64
}

fn check_folds(folds: &[FoldEstimate], shape: FoldShape) -> Result<()> {
    if folds.is_empty() {
        return Err(Error::InvalidArgument("no folds".into()));
    }
    if shape.m1 < 2 || shape.m0 < 2 {
        return Err(Error::InvalidArgument("each fold needs at least two units per arm".into()));
    }
    if folds.iter().any(|f| f.tau.len() != shape.k) {
        return Err(Error::InvalidArgument("fold estimates disagree on the group count".into()));
    }
    Ok(())
}

/// Variance of the fold-averaged estimator from per-fold pieces. Works for any
/// `L ≥ 1`; with one fold it is the sample-splitting variance.
pub fn crossfit_variance_from(folds: &[FoldEstimate], shape: FoldShape) -> Result<CrossFitVariance> {
    check_folds(folds, shape)?;
    let l = folds.len() as f64;
    let kf = shape.k as f64;
    let (m1, m0, m) = (shape.m1 as f64, shape.m0 as f64, shape.m() as f64);
    let mut out = CrossFitVariance {
        variance: Vec::new(),
        raw: Vec::new(),
        floored: Vec::new(),
        s2_fk_raw: Vec::new(),
        s2_fk_used: Vec::new(),
        e_s2_1: Vec::new(),
        e_s2_0: Vec::new(),
        e_kappa_sq: Vec::new(),
        v_kappa: Vec::new(),
    };
    for k in 0..shape.k {
        let e1 = mean(folds.iter().map(|f| f.components.s2_1[k]));
        let e0 = mean(folds.iter().map(|f| f.components.s2_0[k]));
        let kappa: Vec<f64> = folds.iter().map(|f| f.components.kappa_1[k]).collect();
        let e_k2 = mean(kappa.iter().map(|v| v * v));
        let v_k = sample_cov(&kappa, &kappa);
        let tau: Vec<f64> = folds.iter().map(|f| f.tau[k]).collect();
        let s2f = sample_cov(&tau, &tau);
        let bound = kf * kf * (e1 / m1 + e0 / m0) - (kf - 1.0) / (m - 1.0) * e_k2 + v_k;
        let used = s2f.min(bound);
        out.raw.push(bound - (l - 1.0) / l * used);
        out.s2_fk_raw.push(s2f);
        out.s2_fk_used.push(used);
        out.e_s2_1.push(e1);
        out.e_s2_0.push(e0);
        out.e_kappa_sq.push(e_k2);
        out.v_kappa.push(v_k);
    }
    let (variance, floored) = floor_variances(out.raw.clone());
    out.variance = variance;
    out.floored = floored;
    Ok(out)
}

/// Covariance of the centered fold-averaged GATES vector, before repair.
pub fn crossfit_sigma_entries(folds: &[FoldEstimate], shape: FoldShape) -> Result<DMatrix<f64>> {
    check_folds(folds, shape)?;
    let l = folds.len() as f64;
    let k = shape.k;
    let kf = k as f64;
    let (m1, m0, m) = (shape.m1 as f64, shape.m0 as f64, shape.m() as f64);
    let e1 = folds.iter().fold(DMatrix::zeros(k, k), |acc, f| acc + &f.cross_1) / l;
    let e0 = folds.iter().fold(DMatrix::zeros(k, k), |acc, f| acc + &f.cross_0) / l;
    let centered: Vec<Vec<f64>> = folds
        .iter()
        .map(|f| f.tau.iter().map(|t| t - f.ate).collect())
        .collect();
    let column = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
    let kappa1: Vec<Vec<f64>> = folds.iter().map(|f| f.components.kappa_1.clone()).collect();
    let mut out = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let kappa_term = mean(folds.iter().map(|f| {
                let (k1, k0) = (&f.components.kappa_1, &f.components.kappa_0);
                k1[a] * k1[a] - k1[a] * k0[a] + k1[b] * k1[b] - k1[b] * k0[b] - kf * k1[a] * k1[b]
            }));
            let base = kf * kf * (e1[(a, b)] / m1 + e0[(a, b)] / m0)
                + sample_cov(&column(&kappa1, a), &column(&kappa1, b))
                + (kf - 1.0) / (kf * (m - 1.0)) * kappa_term;
            let spread = sample_cov(&column(&centered, a), &column(&centered, b));
            let spread = if a == b { spread.min(base) } else { spread };
            out[(a, b)] = base - (l - 1.0) / l * spread;
        }
    }
    Ok(out)
}

pub fn crossfit_sigma_from(folds: &[FoldEstimate], shape: FoldShape, pd_floor: f64) -> Result<CovMatrix> {
    CovMatrix::for_centered(crossfit_sigma_entries(folds, shape)?, pd_floor)
}

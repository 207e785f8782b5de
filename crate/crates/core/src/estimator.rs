//! GATES point estimates, exact-variance estimates, intervals, and the cutoff bias bound.

use serde::{Deserialize, Serialize};

use crate::data::ExperimentDataset;
use crate::error::{Arm, Error, Result};
use crate::grouping::GroupAssignment;
use crate::numerics::{normal_quantile, reg_incomplete_beta};

/// Difference in means between the treated and control arms.
pub fn estimate_ate(d: &ExperimentDataset) -> Result<f64> {
    let (mut s1, mut s0) = (0.0, 0.0);
    let (mut n1, mut n0) = (0usize, 0usize);
    for (&y, &t) in d.y().iter().zip(d.treated()) {
        if t {
            s1 += y;
            n1 += 1;
        } else {
            s0 += y;
            n0 += 1;
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(Error::Validation("both arms must be nonempty".into()));
    }
    Ok(s1 / n1 as f64 - s0 / n0 as f64)
}

/// Per-group, per-arm unit counts; `counts[k] = (treated, control)`.
pub fn cell_counts(d: &ExperimentDataset, g: &GroupAssignment) -> Vec<(usize, usize)> {
    let mut counts = vec![(0, 0); g.k];
    for i in 0..d.n() {
        let cell = &mut counts[g.index_of(i)];
        if d.treated()[i] {
            cell.0 += 1;
        } else {
            cell.1 += 1;
        }
    }
    counts
}

pub(crate) fn check_compatible(d: &ExperimentDataset, g: &GroupAssignment) -> Result<()> {
    if d.n() != g.n() {
        return Err(Error::InvalidArgument(format!(
            "group assignment covers {} units, dataset has {}",
            g.n(),
            d.n()
        )));
    }
    if g.k == 0 || !d.n1().is_multiple_of(g.k) || !d.n0().is_multiple_of(g.k) {
        return Err(Error::Divisibility {
            n1: d.n1(),
            n0: d.n0(),
            divisor: g.k,
            what: "group count",
        });
    }
    Ok(())
}

/// Fails unless every group has at least `required` units in each arm.
pub fn check_cells(d: &ExperimentDataset, g: &GroupAssignment, required: usize) -> Result<()> {
    for (k, &(c1, c0)) in cell_counts(d, g).iter().enumerate() {
        for (arm, count) in [(Arm::Treated, c1), (Arm::Control, c0)] {
            if count < required {
                return Err(Error::UndersizedCell {
                    group: k + 1,
                    arm,
                    count,
                    required,
                });
            }
        }
    }
    Ok(())
}

/// `τ̂_k = (K/n1) Σ Y T 1{g=k} − (K/n0) Σ Y (1−T) 1{g=k}`.
pub fn estimate_gates(d: &ExperimentDataset, g: &GroupAssignment) -> Result<Vec<f64>> {
    check_compatible(d, g)?;
    check_cells(d, g, 1)?;
    let kf = g.k as f64;
    let (n1, n0) = (d.n1() as f64, d.n0() as f64);
    let mut tau = vec![0.0; g.k];
    for i in 0..d.n() {
        let y = d.y()[i];
        tau[g.index_of(i)] += if d.treated()[i] { kf * y / n1 } else { -kf * y / n0 };
    }
    Ok(tau)
}

/// Plug-in moments entering the variance of each group estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    /// Within-arm sample variance of `1{g=k} Y` over treated units.
    pub s2_1: Vec<f64>,
    /// Same over control units.
    pub s2_0: Vec<f64>,
    /// Difference in means inside group `k`.
    pub kappa_1: Vec<f64>,
    /// Difference in means outside group `k`; zero when the complement is empty.
    pub kappa_0: Vec<f64>,
}

/// Sample variance (divisor `len − 1`) of `values`.
pub(crate) fn sample_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (count, sum) = values.clone().fold((0usize, 0.0), |(c, s), v| (c + 1, s + v));
    if count < 2 {
        return 0.0;
    }
    let mean = sum / count as f64;
    values.map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64
}

/// Difference in means restricted to units where `keep` holds, or zero when
/// either arm is empty there.
pub(crate) fn diff_in_means(d: &ExperimentDataset, keep: impl Fn(usize) -> bool) -> f64 {
    let (mut s1, mut c1, mut s0, mut c0) = (0.0, 0usize, 0.0, 0usize);
    for i in (0..d.n()).filter(|&i| keep(i)) {
        if d.treated()[i] {
            s1 += d.y()[i];
            c1 += 1;
        } else {
            s0 += d.y()[i];
            c0 += 1;
        }
    }
    if c1 == 0 || c0 == 0 {
        0.0
    } else {
        s1 / c1 as f64 - s0 / c0 as f64
    }
}

pub fn variance_components(d: &ExperimentDataset, g: &GroupAssignment) -> Result<VarianceComponents> {
    check_compatible(d, g)?;
    check_cells(d, g, 2)?;
    let mut out = VarianceComponents {
        s2_1: Vec::with_capacity(g.k),
        s2_0: Vec::with_capacity(g.k),
        kappa_1: Vec::with_capacity(g.k),
        kappa_0: Vec::with_capacity(g.k),
    };
    for k in 0..g.k {
        for (arm, dest) in [(true, &mut out.s2_1), (false, &mut out.s2_0)] {
            let values = (0..d.n())
                .filter(move |&i| d.treated()[i] == arm)
                .map(move |i| if g.index_of(i) == k { d.y()[i] } else { 0.0 });
            dest.push(sample_variance(values));
        }
        out.kappa_1.push(diff_in_means(d, |i| g.index_of(i) == k));
        out.kappa_0.push(diff_in_means(d, |i| g.index_of(i) != k));
    }
    Ok(out)
}

/// Variance estimates for each group, floored at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatesVariance {
    pub variance: Vec<f64>,
    /// Values before flooring.
    pub raw: Vec<f64>,
    pub floored: Vec<bool>,
    pub components: VarianceComponents,
}

pub(crate) fn floor_variances(raw: Vec<f64>) -> (Vec<f64>, Vec<bool>) {
    let floored: Vec<bool> = raw.iter().map(|&v| v < 0.0).collect();
    (raw.iter().map(|&v| v.max(0.0)).collect(), floored)
}

/// `K²(S²_k1/n1 + S²_k0/n0) − (K−1)/(n−1)·κ²_k1` per group.
pub fn estimate_gates_variance(d: &ExperimentDataset, g: &GroupAssignment) -> Result<GatesVariance> {
    let components = variance_components(d, g)?;
    let kf = g.k as f64;
    let (n1, n0, n) = (d.n1() as f64, d.n0() as f64, d.n() as f64);
    let raw: Vec<f64> = (0..g.k)
        .map(|k| {
            kf * kf * (components.s2_1[k] / n1 + components.s2_0[k] / n0)
                - (kf - 1.0) / (n - 1.0) * components.kappa_1[k].powi(2)
        })
        .collect();
    let (variance, floored) = floor_variances(raw.clone());
    Ok(GatesVariance {
        variance,
        raw,
        floored,
        components,
    })
}

/// Two-sided normal intervals `τ̂ ± z·√v`.
pub fn confidence_intervals(tau: &[f64], var: &[f64], level: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} is outside (0, 1)")));
    }
    if tau.len() != var.len() {
        return Err(Error::InvalidArgument(format!(
            "{} estimates but {} variances",
            tau.len(),
            var.len()
        )));
    }
    if let Some(v) = var.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("variance {v} is negative or NaN")));
    }
    let z = normal_quantile((1.0 + level) / 2.0)?;
    let half: Vec<f64> = var.iter().map(|v| z * v.sqrt()).collect();
    Ok((
        tau.iter().zip(&half).map(|(t, h)| t - h).collect(),
        tau.iter().zip(&half).map(|(t, h)| t + h).collect(),
    ))
}

/// Full sample-splitting GATES analysis for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatesResult {
    pub tau_hat: Vec<f64>,
    pub var_hat: Vec<f64>,
    pub std_error: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    pub ate_hat: f64,
    pub level: f64,
    pub var_floored: Vec<bool>,
    pub components: VarianceComponents,
}

pub fn analyze_gates(d: &ExperimentDataset, g: &GroupAssignment, level: f64) -> Result<GatesResult> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} is outside (0, 1)")));
    }
    let tau_hat = estimate_gates(d, g)?;
    let v = estimate_gates_variance(d, g)?;
    let (ci_lo, ci_hi) = confidence_intervals(&tau_hat, &v.variance, level)?;
    Ok(GatesResult {
        std_error: v.variance.iter().map(|x| x.sqrt()).collect(),
        tau_hat,
        var_hat: v.variance,
        ci_lo,
        ci_hi,
        ate_hat: estimate_ate(d)?,
        level,
        var_floored: v.floored,
        components: v.components,
    })
}

/// Probability that the group-`k` estimate is biased by at least `epsilon`
/// through cutoff estimation error, bounded by a union over the two cutoffs.
///
/// `m_k` and `m_km1` bound the absolute CATE near the `k`-th and `(k−1)`-th
/// cutoffs. The result is a diagnostic, clamped to `[0, 1]`.
pub fn bias_bound(n: usize, groups: usize, k: usize, epsilon: f64, m_k: f64, m_km1: f64) -> Result<f64> {
    if groups == 0 || k == 0 || k > groups {
        return Err(Error::InvalidArgument(format!("group index {k} outside 1..={groups}")));
    }
    if n == 0 || !n.is_multiple_of(groups) {
        return Err(Error::InvalidArgument(format!("K = {groups} must divide n = {n}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon = {epsilon} must be positive")));
    }
    for m in [m_k, m_km1] {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidArgument(format!("CATE bound {m} must be positive")));
        }
    }
    let kf = groups as f64;
    let nf = n as f64;
    let tail = |j: usize, m: f64| -> Result<f64> {
        let gamma = epsilon / (kf * m);
        let q = j as f64 / kf;
        let alpha = nf * q;
        let beta = nf - alpha + 1.0;
        let cdf = |x: f64| -> Result<f64> {
            if x < 0.0 {
                Ok(0.0)
            } else if x > 1.0 {
                Ok(1.0)
            } else {
                reg_incomplete_beta(x, alpha, beta)
            }
        };
        let upper = cdf(q + gamma)?;
        let lower = cdf(q - gamma)?;
        Ok(1.0 - upper + lower)
    };
    let total = tail(k, m_k)? + tail(k - 1, m_km1)?;
    Ok(total.clamp(0.0, 1.0))
}

//! Cross-fitting: score each fold with a rule trained on the other folds,
//! estimate GATES within the fold, and average.

mod trainer;
mod variance;

pub use trainer::{score_via_external, train_linear_tlearner, LinearTLearner, Scored, TrainerSpec};
pub use variance::{crossfit_sigma_entries, crossfit_sigma_from, crossfit_variance_from, CrossFitVariance, FoldShape};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_folds, ExperimentDataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::estimator::{confidence_intervals, estimate_ate, estimate_gates, variance_components, VarianceComponents};
use crate::grouping::{assign_groups, GroupAssignment};
use crate::hypothesis::{centered_cross_moments, het_test, rank_test, CovMatrix, TestResult};
use crate::numerics::RngStream;

const TRAINER_SEED_TAG: u64 = 0x7261_696e;

/// Everything estimated inside one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEstimate {
    /// Rows of the full dataset in this fold, ascending.
    pub members: Vec<usize>,
    pub scores: Vec<f64>,
    /// Groups over `members`, cut at fold-local cutoffs.
    pub groups: GroupAssignment,
    pub tau: Vec<f64>,
    /// Difference in means within the fold.
    pub ate: f64,
    pub components: VarianceComponents,
    /// Within-arm covariance of the centered group transforms.
    pub cross_1: DMatrix<f64>,
    pub cross_0: DMatrix<f64>,
    pub rank_deficient: bool,
}

impl FoldEstimate {
    /// Estimates for one fold given its scores.
    pub fn from_scores(fold: &ExperimentDataset, members: Vec<usize>, scores: Vec<f64>, k: usize) -> Result<Self> {
        let scored = fold.with_score(scores.clone())?;
        let groups = assign_groups(&scores, k)?;
        Ok(FoldEstimate {
            tau: estimate_gates(&scored, &groups)?,
            ate: estimate_ate(&scored)?,
            components: variance_components(&scored, &groups)?,
            cross_1: centered_cross_moments(&scored, &groups, true),
            cross_0: centered_cross_moments(&scored, &groups, false),
            members,
            scores,
            groups,
            rank_deficient: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFitResult {
    pub k: usize,
    pub folds: FoldAssignment,
    pub per_fold: Vec<FoldEstimate>,
    /// Average of the fold estimates.
    pub pooled_tau: Vec<f64>,
    /// Full-sample difference in means (equal to the average fold ATE).
    pub ate_hat: f64,
}

impl CrossFitResult {
    pub fn shape(&self) -> FoldShape {
        FoldShape {
            k: self.k,
            m1: self.folds.m1,
            m0: self.folds.m0,
        }
    }

    pub fn per_fold_tau(&self) -> Vec<Vec<f64>> {
        self.per_fold.iter().map(|f| f.tau.clone()).collect()
    }

    pub fn rank_deficient(&self) -> bool {
        self.per_fold.iter().any(|f| f.rank_deficient)
    }
}

fn check_fold_groups(d: &ExperimentDataset, folds: &FoldAssignment, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("group count K = {k} must be at least 2")));
    }
    if !folds.m1.is_multiple_of(k) || !folds.m0.is_multiple_of(k) {
        return Err(Error::Divisibility {
            n1: d.n1(),
            n0: d.n0(),
            divisor: k * folds.folds,
            what: "groups within folds",
        });
    }
    Ok(())
}

/// Splits `d` into `l` stratified folds and cross-fits.
pub fn run_crossfit(d: &ExperimentDataset, trainer: &TrainerSpec, k: usize, l: usize, seed: u64) -> Result<CrossFitResult> {
    if trainer.needs_covariates() && d.covariates().is_none() {
        return Err(Error::InvalidArgument("this trainer needs covariate columns".into()));
    }
    let folds = split_folds(d, l, seed)?;
    run_crossfit_with_folds(d, trainer, k, folds, seed)
}

/// Cross-fits over a given fold assignment. Folds run on the current rayon pool.
pub fn run_crossfit_with_folds(
    d: &ExperimentDataset,
    trainer: &TrainerSpec,
    k: usize,
    folds: FoldAssignment,
    seed: u64,
) -> Result<CrossFitResult> {
    check_fold_groups(d, &folds, k)?;
    let per_fold: Vec<Result<FoldEstimate>> = (0..folds.folds)
        .into_par_iter()
        .map(|l| {
            let members = folds.members(l);
            let train = d.subset(&folds.complement(l))?;
            let eval = d.subset(&members)?;
            let trainer_seed = RngStream::new(seed, l as u64).derive_seed(TRAINER_SEED_TAG);
            let scored = trainer.score(&train, &eval, trainer_seed).map_err(|e| e.trainer_on_fold(l))?;
            if scored.scores.len() != eval.n() {
                return Err(Error::Trainer {
                    fold: Some(l),
                    message: format!("{} scores for {} rows", scored.scores.len(), eval.n()),
                });
            }
            let mut est = FoldEstimate::from_scores(&eval, members, scored.scores, k)?;
            est.rank_deficient = scored.rank_deficient;
            Ok(est)
        })
        .collect();
    let per_fold = per_fold.into_iter().collect::<Result<Vec<_>>>()?;
    let lf = per_fold.len() as f64;
    let pooled_tau = (0..k).map(|j| per_fold.iter().map(|f| f.tau[j]).sum::<f64>() / lf).collect();
    Ok(CrossFitResult {
        k,
        ate_hat: estimate_ate(d)?,
        folds,
        per_fold,
        pooled_tau,
    })
}

pub fn crossfit_variance(r: &CrossFitResult) -> Result<CrossFitVariance> {
    crossfit_variance_from(&r.per_fold, r.shape())
}

pub fn crossfit_sigma(r: &CrossFitResult) -> Result<CovMatrix> {
    crossfit_sigma_from(&r.per_fold, r.shape(), crate::DEFAULT_PD_FLOOR)
}

pub fn crossfit_het_test(r: &CrossFitResult, sigma: &CovMatrix) -> Result<TestResult> {
    het_test(&r.pooled_tau, r.ate_hat, sigma)
}

pub fn crossfit_rank_test(r: &CrossFitResult, sigma: &CovMatrix, n_mc: usize, seed: u64) -> Result<TestResult> {
    rank_test(&r.pooled_tau, r.ate_hat, sigma, n_mc, seed)
}

/// Cross-fit estimates with intervals and both tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFitAnalysis {
    pub result: CrossFitResult,
    pub variance: CrossFitVariance,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    pub level: f64,
    pub sigma: CovMatrix,
    pub het: TestResult,
    pub rank: TestResult,
}

/// Settings for [`analyze_crossfit`].
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitConfig {
    pub k: usize,
    pub folds: usize,
    pub level: f64,
    pub n_mc: usize,
    pub seed: u64,
}

pub fn analyze_crossfit(d: &ExperimentDataset, trainer: &TrainerSpec, cfg: &CrossFitConfig) -> Result<CrossFitAnalysis> {
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {} is outside (0, 1)", cfg.level)));
    }
    let result = run_crossfit(d, trainer, cfg.k, cfg.folds, cfg.seed)?;
    let variance = crossfit_variance(&result)?;
    let (ci_lo, ci_hi) = confidence_intervals(&result.pooled_tau, &variance.variance, cfg.level)?;
    let sigma = crossfit_sigma(&result)?;
    let het = crossfit_het_test(&result, &sigma)?;
    let rank_seed = RngStream::new(cfg.seed, u64::MAX).derive_seed(1);
    let rank = crossfit_rank_test(&result, &sigma, cfg.n_mc, rank_seed)?;
    Ok(CrossFitAnalysis {
        result,
        variance,
        ci_lo,
        ci_hi,
        level: cfg.level,
        sigma,
        het,
        rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Covariates;
    use crate::estimator::estimate_gates_variance;
    use crate::hypothesis::{build_sigma, sigma_entries};

    fn d8() -> ExperimentDataset {
        let y = vec![1.0, 2.0, 3.0, 4.0, 10.0, 12.0, 14.0, 16.0];
        let t = (0..8).map(|i| i % 2 == 0).collect();
        let s = (1..=8).map(|i| 10.0 * i as f64).collect();
        ExperimentDataset::new(y, t, Some(s), None).unwrap()
    }

    fn synthetic(n: usize) -> ExperimentDataset {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![((i * 37) % 101) as f64 / 50.0 - 1.0, ((i * 53) % 97) as f64 / 48.0 - 1.0])
            .collect();
        let t: Vec<bool> = (0..n).map(|i| (i * 7) % 4 < 2).collect();
        let y = rows
            .iter()
            .zip(&t)
            .enumerate()
            .map(|(i, (r, &ti))| r[0] + if ti { 1.0 + r[1] } else { 0.0 } + ((i * 13) % 7) as f64 / 7.0)
            .collect();
        ExperimentDataset::new(y, t, None, Some(Covariates::from_rows(vec!["x1".into(), "x2".into()], &rows).unwrap()))
            .unwrap()
    }

    #[test]
    fn single_fold_reduces_to_sample_splitting() {
        let d = d8();
        let est = FoldEstimate::from_scores(&d, (0..8).collect(), d.score().unwrap().to_vec(), 2).unwrap();
        let shape = FoldShape { k: 2, m1: 4, m0: 4 };
        let cf = crossfit_variance_from(std::slice::from_ref(&est), shape).unwrap();
        let g = assign_groups(d.score().unwrap(), 2).unwrap();
        let ss = estimate_gates_variance(&d, &g).unwrap();
        for k in 0..2 {
            assert!((cf.raw[k] - ss.raw[k]).abs() <= 1e-12 * ss.raw[k].abs().max(1.0));
        }
        let sig = crossfit_sigma_entries(std::slice::from_ref(&est), shape).unwrap();
        let ssig = sigma_entries(&d, &g).unwrap();
        assert!((sig - ssig).amax() < 1e-12);
    }

    #[test]
    fn replicated_fold_matches_sample_splitting_tests() {
        let d = d8();
        let est = FoldEstimate::from_scores(&d, (0..8).collect(), d.score().unwrap().to_vec(), 2).unwrap();
        let folds = vec![est.clone(), est.clone(), est];
        let shape = FoldShape { k: 2, m1: 4, m0: 4 };
        let cf_sigma = crossfit_sigma_from(&folds, shape, crate::DEFAULT_PD_FLOOR).unwrap();
        let g = assign_groups(d.score().unwrap(), 2).unwrap();
        let ss_sigma = build_sigma(&d, &g).unwrap();
        let tau = estimate_gates(&d, &g).unwrap();
        let ate = estimate_ate(&d).unwrap();
        let a = het_test(&tau, ate, &cf_sigma).unwrap();
        let b = het_test(&tau, ate, &ss_sigma).unwrap();
        assert!((a.p_value - b.p_value).abs() < 1e-9);
        let ra = rank_test(&tau, ate, &cf_sigma, 2000, 5).unwrap();
        let rb = rank_test(&tau, ate, &ss_sigma, 2000, 5).unwrap();
        assert!((ra.p_value - rb.p_value).abs() < 1e-9);
        let v = crossfit_variance_from(&folds, shape).unwrap();
        assert_eq!(v.s2_fk_raw, vec![0.0, 0.0]);
        assert_eq!(v.s2_fk_used, vec![0.0, 0.0]);
    }

    #[test]
    fn fixed_rule_matches_per_fold_estimator() {
        let d = synthetic(80);
        let r = run_crossfit(&d, &TrainerSpec::Covariate { column: "x1".into() }, 2, 4, 11).unwrap();
        let mut mean = [0.0; 2];
        for l in 0..4 {
            let fold = d.subset(&r.folds.members(l)).unwrap();
            let scores = fold.covariates().unwrap().column(0);
            let g = assign_groups(&scores, 2).unwrap();
            let tau = estimate_gates(&fold, &g).unwrap();
            for k in 0..2 {
                mean[k] += tau[k] / 4.0;
            }
            let fold_ate = estimate_ate(&fold).unwrap();
            assert!((r.per_fold[l].tau.iter().sum::<f64>() / 2.0 - fold_ate).abs() < 1e-12);
        }
        for k in 0..2 {
            assert!((r.pooled_tau[k] - mean[k]).abs() < 1e-12);
        }
        let avg_ate = r.per_fold.iter().map(|f| f.ate).sum::<f64>() / 4.0;
        assert!((avg_ate - r.ate_hat).abs() < 1e-12);
    }

    #[test]
    fn zero_outcomes() {
        let d = synthetic(80).map_outcomes(|_| 0.0).unwrap();
        let r = run_crossfit(&d, &TrainerSpec::LinearTLearner, 2, 2, 3).unwrap();
        assert!(r.pooled_tau.iter().all(|&v| v == 0.0));
        assert!(crossfit_variance(&r).unwrap().variance.iter().all(|&v| v == 0.0));
        let s = crossfit_sigma(&r).unwrap();
        assert!(s.repaired);
        assert_eq!(s.raw, DMatrix::zeros(2, 2));
        let het = crossfit_het_test(&r, &s).unwrap();
        assert_eq!(het.statistic, 0.0);
        assert_eq!(het.p_value, 1.0);
    }

    #[test]
    fn permuted_rows_with_pinned_folds() {
        let d = synthetic(80);
        let trainer = TrainerSpec::LinearTLearner;
        let r = run_crossfit(&d, &trainer, 2, 2, 9).unwrap();
        let perm: Vec<usize> = (0..80).rev().collect();
        let dp = d.subset(&perm).unwrap();
        let fold_of = perm.iter().map(|&i| r.folds.fold_of[i]).collect();
        let folds = FoldAssignment::from_fold_of(&dp, fold_of).unwrap();
        let rp = run_crossfit_with_folds(&dp, &trainer, 2, folds, 9).unwrap();
        for k in 0..2 {
            assert!((r.pooled_tau[k] - rp.pooled_tau[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn conservative_spread_never_exceeds_realized() {
        let d = synthetic(160);
        let r = run_crossfit(&d, &TrainerSpec::LinearTLearner, 2, 4, 21).unwrap();
        let v = crossfit_variance(&r).unwrap();
        for k in 0..2 {
            assert!(v.s2_fk_used[k] <= v.s2_fk_raw[k]);
            assert_eq!(v.floored[k], v.raw[k] < 0.0);
        }
        let s = crossfit_sigma(&r).unwrap();
        assert_eq!(s.raw, s.raw.transpose());
    }

    #[test]
    fn divisibility_and_trainer_errors() {
        let d = synthetic(80);
        assert!(matches!(
            run_crossfit(&d, &TrainerSpec::LinearTLearner, 2, 3, 0),
            Err(Error::Divisibility { .. })
        ));
        assert!(matches!(
            run_crossfit(&d, &TrainerSpec::LinearTLearner, 3, 2, 0),
            Err(Error::Divisibility { .. })
        ));
        let err = run_crossfit(&d, &TrainerSpec::Covariate { column: "zz".into() }, 2, 2, 0).unwrap_err();
        assert!(err.to_string().contains("fold 1"), "{err}");
    }

    #[test]
    fn deterministic_across_pools() {
        let d = synthetic(160);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                let cfg = CrossFitConfig { k: 2, folds: 4, level: 0.95, n_mc: 2000, seed: 4 };
                serde_json::to_string(&analyze_crossfit(&d, &TrainerSpec::LinearTLearner, &cfg).unwrap()).unwrap()
            })
        };
        assert_eq!(run(1), run(4));
    }
}

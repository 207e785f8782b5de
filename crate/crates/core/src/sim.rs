//! Synthetic experiments from a fixed nonlinear outcome model, and a Monte
//! Carlo harness for bias, coverage, size, and power.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossfit::{analyze_crossfit, train_linear_tlearner, CrossFitConfig, TrainerSpec};
use crate::data::{Covariates, ExperimentDataset};
use crate::error::{Error, Result};
use crate::estimator::analyze_gates;
use crate::grouping::assign_groups;
use crate::hypothesis::{build_sigma, het_test, rank_test};
use crate::numerics::RngStream;

/// Covariates used by the outcome model, in storage order.
pub const COVARIATE_NAMES: [&str; 8] = ["x4", "x17", "x27", "x29", "x30", "x37", "x42", "x54"];

/// Minimum population draws for oracle GATES.
pub const MIN_ORACLE_DRAWS: usize = 100_000;

const TRUTH_STREAM: u64 = u64::MAX - 1;
const TRIAL_SEED_TAG: u64 = 0x7472_6961;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariateRecord {
    pub x4: f64,
    pub x17: f64,
    pub x27: f64,
    pub x29: f64,
    pub x30: f64,
    pub x37: f64,
    pub x42: f64,
    pub x54: f64,
}

impl CovariateRecord {
    /// Values in [`COVARIATE_NAMES`] order.
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != COVARIATE_NAMES.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} covariates, got {}",
                COVARIATE_NAMES.len(),
                v.len()
            )));
        }
        Ok(CovariateRecord {
            x4: v[0],
            x17: v[1],
            x27: v[2],
            x29: v[3],
            x30: v[4],
            x37: v[5],
            x42: v[6],
            x54: v[7],
        })
    }

    /// Picks the model covariates out of arbitrarily named columns.
    pub fn from_named(names: &[String], values: &[f64]) -> Result<Self> {
        let mut out = [0.0; 8];
        for (slot, want) in out.iter_mut().zip(COVARIATE_NAMES) {
            let j = names
                .iter()
                .position(|n| n == want)
                .ok_or_else(|| Error::Schema(format!("missing covariate `{want}`")))?;
            *slot = *values
                .get(j)
                .ok_or_else(|| Error::InvalidArgument(format!("no value for covariate `{want}`")))?;
        }
        CovariateRecord::from_slice(&out)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "x4" => self.x4,
            "x17" => self.x17,
            "x27" => self.x27,
            "x29" => self.x29,
            "x30" => self.x30,
            "x37" => self.x37,
            "x42" => self.x42,
            "x54" => self.x54,
            _ => return None,
        })
    }

    fn to_array(self) -> [f64; 8] {
        [self.x4, self.x17, self.x27, self.x29, self.x30, self.x37, self.x42, self.x54]
    }
}

fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Conditional mean outcome under arm `treated`.
pub fn benchmark_outcome_mean(x: &CovariateRecord, treated: bool) -> f64 {
    let t1 = ind(treated);
    let t0 = 1.0 - t1;
    let (x29, x27) = (x.x29, x.x27);
    1.60 + 0.53 * x29 - 3.80 * x29 * (x29 - 0.98) * (x29 + 0.86) - 0.32 * ind(x.x17 > 0.0) + 0.21 * ind(x.x42 > 0.0)
        - 0.63 * x27
        + 4.68 * ind(x27 < -0.61)
        - 0.39 * (x27 + 0.91) * ind(x27 < -0.91)
        + 0.75 * ind(x.x30 <= 0.0)
        - 1.22 * ind(x.x54 <= 0.0)
        + 0.11 * x.x37 * ind(x.x4 <= 0.0)
        - 0.71 * ind(x.x17 <= 0.0) * t0
        - 1.82 * ind(x.x42 <= 0.0) * t1
        + 0.28 * ind(x.x30 <= 0.0) * t0
        + (0.58 * x29 - 9.42 * x29 * (x29 - 0.67) * (x29 + 0.34)) * t1
        + (0.44 * x27 - 4.87 * ind(x27 < -0.80)) * t0
        - 2.54 * t0 * ind(x.x54 <= 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectMode {
    Heterogeneous,
    /// Both arms follow the control-arm mean; the treated arm is shifted by one.
    Homogeneous,
}

impl EffectMode {
    pub fn outcome_mean(self, x: &CovariateRecord, treated: bool) -> f64 {
        match self {
            EffectMode::Heterogeneous => benchmark_outcome_mean(x, treated),
            EffectMode::Homogeneous => benchmark_outcome_mean(x, false) + ind(treated),
        }
    }

    pub fn cate(self, x: &CovariateRecord) -> f64 {
        self.outcome_mean(x, true) - self.outcome_mean(x, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n: usize,
    pub noise_sd: f64,
    pub effect_mode: EffectMode,
}

impl DgpSpec {
    pub fn new(n: usize, effect_mode: EffectMode) -> Self {
        DgpSpec {
            n,
            noise_sd: 1.0,
            effect_mode,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || !self.n.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("sample size n = {} must be even and positive", self.n)));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_sd = {} must be nonnegative", self.noise_sd)));
        }
        Ok(())
    }
}

fn draw_record<R: rand::Rng>(rng: &mut R) -> CovariateRecord {
    let mut v = [0.0; 8];
    for x in v.iter_mut() {
        *x = StandardNormal.sample(rng);
    }
    CovariateRecord::from_slice(&v).expect("eight values")
}

/// One completely randomized experiment with exactly `n/2` treated units.
pub fn generate_trial(dgp: &DgpSpec, stream: RngStream) -> Result<ExperimentDataset> {
    dgp.validate()?;
    let mut rng = stream.rng();
    let records: Vec<CovariateRecord> = (0..dgp.n).map(|_| draw_record(&mut rng)).collect();
    let mut order: Vec<usize> = (0..dgp.n).collect();
    order.shuffle(&mut rng);
    let mut treated = vec![false; dgp.n];
    for &i in &order[..dgp.n / 2] {
        treated[i] = true;
    }
    let y = records
        .iter()
        .zip(&treated)
        .map(|(x, &t)| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            dgp.effect_mode.outcome_mean(x, t) + dgp.noise_sd * noise
        })
        .collect();
    let values: Vec<f64> = records.iter().flat_map(|r| r.to_array()).collect();
    let x = Covariates::new(COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(), values)?;
    ExperimentDataset::new(y, treated, None, Some(x))
}

/// A scoring rule that does not depend on training data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "column", rename_all = "snake_case")]
pub enum ScoreRule {
    Covariate(String),
    /// The true conditional effect under the DGP.
    TrueCate,
}

impl ScoreRule {
    fn check(&self) -> Result<()> {
        match self {
            ScoreRule::Covariate(c) if !COVARIATE_NAMES.contains(&c.as_str()) => Err(Error::InvalidArgument(format!(
                "unknown covariate `{c}`; available: {}",
                COVARIATE_NAMES.join(", ")
            ))),
            _ => Ok(()),
        }
    }

    pub fn score(&self, mode: EffectMode, x: &CovariateRecord) -> f64 {
        match self {
            ScoreRule::Covariate(c) => x.get(c).unwrap_or(f64::NAN),
            ScoreRule::TrueCate => mode.cate(x),
        }
    }

    fn score_dataset(&self, mode: EffectMode, d: &ExperimentDataset) -> Result<Vec<f64>> {
        let x = d
            .covariates()
            .ok_or_else(|| Error::InvalidArgument("dataset has no covariates".into()))?;
        (0..d.n())
            .map(|i| Ok(self.score(mode, &CovariateRecord::from_named(x.names(), x.row(i))?)))
            .collect()
    }
}

/// Population GATES with Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleGates {
    pub values: Vec<f64>,
    pub std_error: Vec<f64>,
    pub draws: usize,
}

/// Mean CATE within population score-quantile groups, given paired draws.
fn grouped_cate_means(scores: &[f64], cate: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut sums = vec![(0.0, 0.0, 0usize); k];
    for (rank, &i) in order.iter().enumerate() {
        let cell = &mut sums[rank * k / n];
        cell.0 += cate[i];
        cell.1 += cate[i] * cate[i];
        cell.2 += 1;
    }
    let means: Vec<f64> = sums.iter().map(|&(s, _, c)| s / c as f64).collect();
    let ses = sums
        .iter()
        .zip(&means)
        .map(|(&(_, ss, c), &m)| {
            let var = (ss / c as f64 - m * m).max(0.0) * c as f64 / (c as f64 - 1.0).max(1.0);
            (var / c as f64).sqrt()
        })
        .collect();
    (means, ses)
}

pub fn true_gates_oracle(dgp: &DgpSpec, rule: &ScoreRule, k: usize, n_mc: usize, stream: RngStream) -> Result<OracleGates> {
    if n_mc < MIN_ORACLE_DRAWS {
        return Err(Error::InvalidArgument(format!(
            "oracle needs at least {MIN_ORACLE_DRAWS} draws, got {n_mc}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("group count must be positive".into()));
    }
    rule.check()?;
    let mut rng = stream.rng();
    let records: Vec<CovariateRecord> = (0..n_mc).map(|_| draw_record(&mut rng)).collect();
    let scores: Vec<f64> = records.iter().map(|x| rule.score(dgp.effect_mode, x)).collect();
    let cate: Vec<f64> = records.iter().map(|x| dgp.effect_mode.cate(x)).collect();
    let (values, std_error) = grouped_cate_means(&scores, &cate, k);
    Ok(OracleGates {
        values,
        std_error,
        draws: n_mc,
    })
}

/// Population GATES of a rule retrained on fresh training sets of size
/// `train_n`, averaged over `reps` training sets.
pub fn true_crossfit_gates_oracle(
    dgp: &DgpSpec,
    trainer: &TrainerSpec,
    k: usize,
    train_n: usize,
    reps: usize,
    population: usize,
    seed: u64,
) -> Result<OracleGates> {
    if reps < 2 || population < k {
        return Err(Error::InvalidArgument("oracle needs at least two replications and k population draws".into()));
    }
    let mut rng = RngStream::new(seed, TRUTH_STREAM).rng();
    let records: Vec<CovariateRecord> = (0..population).map(|_| draw_record(&mut rng)).collect();
    let cate: Vec<f64> = records.iter().map(|x| dgp.effect_mode.cate(x)).collect();
    let values: Vec<f64> = records.iter().flat_map(|r| r.to_array()).collect();
    let pop_x = Covariates::new(COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(), values)?;
    let pop_y = vec![0.0; population];
    let pop_t: Vec<bool> = (0..population).map(|i| i % 2 == 0).collect();
    let pop = ExperimentDataset::new(pop_y, pop_t, None, Some(pop_x))?;
    let train_dgp = DgpSpec { n: train_n, ..*dgp };
    let per_rep: Vec<Result<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let train = generate_trial(&train_dgp, RngStream::new(seed, r as u64))?;
            let scores = match trainer {
                TrainerSpec::LinearTLearner => train_linear_tlearner(&train)?.predict(pop.covariates().expect("set"))?,
                other => other.score(&train, &pop, r as u64)?.scores,
            };
            Ok(grouped_cate_means(&scores, &cate, k).0)
        })
        .collect();
    let per_rep = per_rep.into_iter().collect::<Result<Vec<_>>>()?;
    let rf = reps as f64;
    let values: Vec<f64> = (0..k).map(|j| per_rep.iter().map(|v| v[j]).sum::<f64>() / rf).collect();
    let std_error = (0..k)
        .map(|j| {
            let var = per_rep.iter().map(|v| (v[j] - values[j]).powi(2)).sum::<f64>() / (rf - 1.0);
            (var / rf).sqrt()
        })
        .collect();
    Ok(OracleGates {
        values,
        std_error,
        draws: reps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimScoring {
    /// Score from a fixed rule; the whole trial is the evaluation sample.
    Fixed { rule: ScoreRule },
    /// Rules retrained per fold.
    CrossFit { trainer: TrainerSpec, folds: usize, truth_reps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dgp: DgpSpec,
    pub scoring: SimScoring,
    pub k: usize,
    pub trials: usize,
    pub level: f64,
    /// Significance level for the rejection rates.
    pub alpha: f64,
    pub seed: u64,
    pub rank_draws: usize,
    pub truth_draws: usize,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl SimConfig {
    pub fn new(dgp: DgpSpec, scoring: SimScoring, k: usize, trials: usize, seed: u64) -> Self {
        SimConfig {
            dgp,
            scoring,
            k,
            trials,
            level: 0.95,
            alpha: 0.05,
            seed,
            rank_draws: 10_000,
            truth_draws: 1_000_000,
            threads: None,
        }
    }

    fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("group count K = {} must be at least 2", self.k)));
        }
        if !(self.level > 0.0 && self.level < 1.0) || !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument("level and alpha must lie in (0, 1)".into()));
        }
        let arm = self.dgp.n / 2;
        let divisor = match &self.scoring {
            SimScoring::Fixed { rule } => {
                rule.check()?;
                self.k
            }
            SimScoring::CrossFit { trainer, folds, truth_reps } => {
                if *folds < 2 {
                    return Err(Error::InvalidArgument("cross-fitting needs at least two folds".into()));
                }
                if *truth_reps < 2 {
                    return Err(Error::InvalidArgument("truth_reps must be at least 2".into()));
                }
                if matches!(trainer, TrainerSpec::Precomputed) {
                    return Err(Error::InvalidArgument("simulated trials carry no precomputed scores".into()));
                }
                if let TrainerSpec::Covariate { column } = trainer {
                    ScoreRule::Covariate(column.clone()).check()?;
                }
                self.k * folds
            }
        };
        if !arm.is_multiple_of(divisor) {
            return Err(Error::Divisibility {
                n1: arm,
                n0: arm,
                divisor,
                what: "simulated arm size",
            });
        }
        Ok(())
    }
}

/// Per-trial outcome before aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub tau: Vec<f64>,
    pub var: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    pub het_p: f64,
    pub rank_p: f64,
    pub floored: bool,
    pub repaired: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub k: usize,
    pub n: usize,
    pub truth: f64,
    pub truth_se: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub sd: f64,
    pub mean_se: f64,
    /// Mean estimated variance over empirical variance.
    pub variance_ratio: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRow {
    pub test: String,
    pub n: usize,
    pub rejection_rate: f64,
    pub median_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub groups: Vec<GroupRow>,
    pub tests: Vec<TestRow>,
    pub completed_trials: usize,
    pub failed_trials: usize,
    /// First few failure messages, by trial index.
    pub failures: Vec<(usize, String)>,
    pub floored_trials: usize,
    pub repaired_trials: usize,
}

impl SimReport {
    pub fn groups_csv(&self) -> String {
        let mut s = String::from("k,n,truth,truth_se,mean_estimate,bias,sd,mean_se,variance_ratio,coverage\n");
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                g.k, g.n, g.truth, g.truth_se, g.mean_estimate, g.bias, g.sd, g.mean_se, g.variance_ratio, g.coverage
            );
        }
        s
    }

    pub fn tests_csv(&self) -> String {
        let mut s = String::from("test,n,rejection_rate,median_p\n");
        for t in &self.tests {
            let _ = writeln!(s, "{},{},{},{}", t.test, t.n, t.rejection_rate, t.median_p);
        }
        s
    }
}

fn run_trial(cfg: &SimConfig, t: usize) -> Result<TrialOutcome> {
    let stream = RngStream::new(cfg.seed, t as u64);
    let d = generate_trial(&cfg.dgp, stream)?;
    let rank_seed = stream.derive_seed(TRIAL_SEED_TAG);
    match &cfg.scoring {
        SimScoring::Fixed { rule } => {
            let scored = d.with_score(rule.score_dataset(cfg.dgp.effect_mode, &d)?)?;
            let g = assign_groups(scored.score().expect("scored"), cfg.k)?;
            let res = analyze_gates(&scored, &g, cfg.level)?;
            let sigma = build_sigma(&scored, &g)?;
            let het = het_test(&res.tau_hat, res.ate_hat, &sigma)?;
            let rank = rank_test(&res.tau_hat, res.ate_hat, &sigma, cfg.rank_draws, rank_seed)?;
            Ok(TrialOutcome {
                floored: res.var_floored.iter().any(|&f| f),
                repaired: sigma.repaired,
                tau: res.tau_hat,
                var: res.var_hat,
                ci_lo: res.ci_lo,
                ci_hi: res.ci_hi,
                het_p: het.p_value,
                rank_p: rank.p_value,
            })
        }
        SimScoring::CrossFit { trainer, folds, .. } => {
            let a = analyze_crossfit(
                &d,
                trainer,
                &CrossFitConfig {
                    k: cfg.k,
                    folds: *folds,
                    level: cfg.level,
                    n_mc: cfg.rank_draws,
                    seed: rank_seed,
                },
            )?;
            Ok(TrialOutcome {
                floored: a.variance.floored.iter().any(|&f| f),
                repaired: a.sigma.repaired,
                tau: a.result.pooled_tau,
                var: a.variance.variance,
                ci_lo: a.ci_lo,
                ci_hi: a.ci_hi,
                het_p: a.het.p_value,
                rank_p: a.rank.p_value,
            })
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Population truth the simulated estimates are compared with.
pub fn simulation_truth(cfg: &SimConfig) -> Result<OracleGates> {
    match &cfg.scoring {
        SimScoring::Fixed { rule } => {
            true_gates_oracle(&cfg.dgp, rule, cfg.k, cfg.truth_draws, RngStream::new(cfg.seed, TRUTH_STREAM))
        }
        SimScoring::CrossFit { trainer, folds, truth_reps } => {
            let train_n = cfg.dgp.n - cfg.dgp.n / folds;
            let population = cfg.truth_draws.min(20_000).max(cfg.k);
            true_crossfit_gates_oracle(&cfg.dgp, trainer, cfg.k, train_n, *truth_reps, population, cfg.seed ^ TRUTH_STREAM)
        }
    }
}

pub fn run_simulation(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let body = || -> Result<SimReport> {
        let truth = simulation_truth(cfg)?;
        let outcomes: Vec<Result<TrialOutcome>> = (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, t)).collect();
        Ok(aggregate(cfg, &truth, outcomes))
    };
    match cfg.threads {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(body),
        None => body(),
    }
}

fn aggregate(cfg: &SimConfig, truth: &OracleGates, outcomes: Vec<Result<TrialOutcome>>) -> SimReport {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    let mut failed = 0;
    for (t, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => ok.push(o),
            Err(e) => {
                failed += 1;
                if failures.len() < 10 {
                    failures.push((t, e.to_string()));
                }
            }
        }
    }
    let r = ok.len() as f64;
    let n = cfg.dgp.n;
    let groups = (0..cfg.k)
        .map(|j| {
            let est: Vec<f64> = ok.iter().map(|o| o.tau[j]).collect();
            let mean = est.iter().sum::<f64>() / r;
            let var = if ok.len() > 1 {
                est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1.0)
            } else {
                f64::NAN
            };
            let mean_var = ok.iter().map(|o| o.var[j]).sum::<f64>() / r;
            let covered = ok
                .iter()
                .filter(|o| o.ci_lo[j] <= truth.values[j] && truth.values[j] <= o.ci_hi[j])
                .count();
            GroupRow {
                k: j + 1,
                n,
                truth: truth.values[j],
                truth_se: truth.std_error[j],
                mean_estimate: mean,
                bias: mean - truth.values[j],
                sd: var.sqrt(),
                mean_se: ok.iter().map(|o| o.var[j].sqrt()).sum::<f64>() / r,
                variance_ratio: mean_var / var,
                coverage: covered as f64 / r,
            }
        })
        .collect();
    let test_row = |name: &str, p: Vec<f64>| TestRow {
        test: name.into(),
        n,
        rejection_rate: p.iter().filter(|&&v| v <= cfg.alpha).count() as f64 / r,
        median_p: median(p),
    };
    let tests = vec![
        test_row("heterogeneity", ok.iter().map(|o| o.het_p).collect()),
        test_row("rank_consistency", ok.iter().map(|o| o.rank_p).collect()),
    ];
    SimReport {
        config: cfg.clone(),
        groups,
        tests,
        completed_trials: ok.len(),
        failed_trials: failed,
        failures,
        floored_trials: ok.iter().filter(|o| o.floored).count(),
        repaired_trials: ok.iter().filter(|o| o.repaired).count(),
    }
}

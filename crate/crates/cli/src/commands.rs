use std::path::Path;

use gates_core::crossfit::{analyze_crossfit, CrossFitConfig};
use gates_core::data::{trim_for_divisibility, CovariateColumns};
use gates_core::estimator::{analyze_gates, bias_bound as core_bias_bound};
use gates_core::hypothesis::{build_sigma_with_floor, matrix_from_rows};
use gates_core::sim::{run_simulation, DgpSpec, EffectMode, ScoreRule, SimConfig, SimScoring};
use gates_core::{assign_groups, het_test as core_het_test, load_dataset, rank_test as core_rank_test};
use gates_core::{ColumnSchema, CovMatrix, Error, ExperimentDataset, TrainerSpec};
use serde_json::{json, Value};

use crate::report::{emit, estimate_rows, sigma_json, summarize_estimates, test_json, CliError};
use crate::{BiasBoundArgs, CrossfitArgs, GatesArgs, HetTestArgs, Mode, RankTestArgs, SimulateArgs, VectorArgs};

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(CliError::usage("--threads must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::runtime(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn check_level(level: f64) -> Result<(), CliError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("confidence level {level} is outside (0, 1)")).into())
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn load(path: &Path, schema: &ColumnSchema) -> Result<ExperimentDataset, CliError> {
    load_dataset(path, schema).map_err(|e| match e {
        // A missing or unreadable input file is the caller's mistake.
        Error::Io(io) => CliError {
            code: 2,
            kind: "io",
            message: format!("{}: {io}", path.display()),
        },
        other => other.into(),
    })
}

pub fn gates(a: GatesArgs) -> Result<(), CliError> {
    check_level(a.level)?;
    let schema = ColumnSchema {
        y: a.data.y_col.clone(),
        t: a.data.t_col.clone(),
        score: Some(a.score_col.clone()),
        covariates: CovariateColumns::None,
    };
    let mut d = load(&a.data.data, &schema)?;
    let mut dropped = Vec::new();
    if a.trim {
        let t = trim_for_divisibility(&d, a.k)?;
        dropped = t.dropped;
        d = t.dataset;
    }
    let (est, groups, sigma, het, rank) = with_threads(a.output.threads, || -> gates_core::Result<_> {
        let groups = assign_groups(d.score().expect("score column loaded"), a.k)?;
        let est = analyze_gates(&d, &groups, a.level)?;
        let sigma = build_sigma_with_floor(&d, &groups, a.pd_floor)?;
        let het = core_het_test(&est.tau_hat, est.ate_hat, &sigma)?;
        let rank = core_rank_test(&est.tau_hat, est.ate_hat, &sigma, a.n_mc, a.seed)?;
        Ok((est, groups, sigma, het, rank))
    })??;

    summarize_estimates(
        &format!("GATES, K = {}, n = {} ({} treated)", a.k, d.n(), d.n1()),
        &est.tau_hat,
        &est.var_hat,
        &est.ci_lo,
        &est.ci_hi,
    );
    eprintln!("  ATE {:.4}; heterogeneity p = {:.4}; rank consistency p = {:.4}", est.ate_hat, het.p_value, rank.p_value);

    let report = json!({
        "command": "gates",
        "config": {
            "data": a.data.data.display().to_string(),
            "y_col": a.data.y_col,
            "t_col": a.data.t_col,
            "score_col": a.score_col,
            "k": a.k,
            "level": a.level,
            "trim": a.trim,
            "n_mc": a.n_mc,
            "pd_floor": a.pd_floor,
            "seed": a.seed,
            "threads": a.output.threads,
        },
        "n": d.n(),
        "n1": d.n1(),
        "n0": d.n0(),
        "dropped_rows": dropped,
        "tau": est.tau_hat,
        "ate": est.ate_hat,
        "level": est.level,
        "groups": estimate_rows(&est.tau_hat, &est.var_hat, &est.ci_lo, &est.ci_hi, &est.var_floored),
        "cutoffs": groups.cutoffs,
        "components": to_value(&est.components),
        "sigma": sigma_json(&sigma),
        "tests": { "heterogeneity": test_json(&het), "rank_consistency": test_json(&rank) },
    });
    emit(report, a.output.out.as_deref())
}

/// Below this many folds the across-fold moments are noisy.
const SMALL_FOLD_COUNT: usize = 10;

fn parse_trainer(a: &CrossfitArgs) -> Result<TrainerSpec, CliError> {
    if let Some(cmd) = &a.trainer_cmd {
        let mut words = shlex::split(cmd)
            .filter(|w| !w.is_empty())
            .ok_or_else(|| CliError::usage(format!("cannot split trainer command `{cmd}`")))?;
        if words.is_empty() {
            return Err(CliError::usage("empty trainer command"));
        }
        let program = words.remove(0);
        return Ok(TrainerSpec::External {
            program,
            args: words,
            timeout_secs: a.trainer_timeout,
        });
    }
    builtin_trainer(&a.trainer)
}

fn builtin_trainer(name: &str) -> Result<TrainerSpec, CliError> {
    match name {
        "linear" => Ok(TrainerSpec::LinearTLearner),
        "precomputed" => Ok(TrainerSpec::Precomputed),
        other => match other.strip_prefix("covariate:") {
            Some(col) if !col.is_empty() => Ok(TrainerSpec::Covariate { column: col.to_string() }),
            _ => Err(CliError::usage(format!(
                "unknown trainer `{other}`; expected linear, precomputed, or covariate:<name>"
            ))),
        },
    }
}

pub fn crossfit(a: CrossfitArgs) -> Result<(), CliError> {
    check_level(a.level)?;
    let trainer = parse_trainer(&a)?;
    let score_col = match (&trainer, &a.score_col) {
        (TrainerSpec::Precomputed, None) => Some("score".to_string()),
        (_, s) => s.clone(),
    };
    let covariates = if trainer.needs_covariates() {
        match &a.x_cols {
            Some(cols) => CovariateColumns::Named(cols.clone()),
            None => CovariateColumns::Remaining,
        }
    } else {
        CovariateColumns::None
    };
    let schema = ColumnSchema {
        y: a.data.y_col.clone(),
        t: a.data.t_col.clone(),
        score: score_col.clone(),
        covariates,
    };
    let d = load(&a.data.data, &schema)?;
    let cfg = CrossFitConfig {
        k: a.k,
        folds: a.folds,
        level: a.level,
        n_mc: a.n_mc,
        seed: a.seed,
    };
    let r = with_threads(a.output.threads, || analyze_crossfit(&d, &trainer, &cfg))??;

    let tau = &r.result.pooled_tau;
    summarize_estimates(
        &format!("Cross-fit GATES, K = {}, L = {}, n = {}", a.k, a.folds, d.n()),
        tau,
        &r.variance.variance,
        &r.ci_lo,
        &r.ci_hi,
    );
    eprintln!(
        "  ATE {:.4}; heterogeneity p = {:.4}; rank consistency p = {:.4}",
        r.result.ate_hat, r.het.p_value, r.rank.p_value
    );
    let mut warnings = Vec::new();
    if a.folds < SMALL_FOLD_COUNT {
        warnings.push(format!(
            "variance plug-ins average over only {} folds; intervals may be conservative",
            a.folds
        ));
    }
    if r.variance.floored.iter().any(|&f| f) {
        warnings.push("a plug-in variance was negative and floored at zero".to_string());
    }
    if r.result.rank_deficient() {
        warnings.push("a fold's linear fit was rank deficient".to_string());
    }
    for w in &warnings {
        eprintln!("  warning: {w}");
    }

    let folds: Vec<Value> = r
        .result
        .per_fold
        .iter()
        .enumerate()
        .map(|(l, f)| {
            json!({
                "fold": l + 1,
                "size": f.members.len(),
                "tau": f.tau,
                "ate": f.ate,
                "cutoffs": f.groups.cutoffs,
                "rank_deficient": f.rank_deficient,
            })
        })
        .collect();
    let report = json!({
        "command": "crossfit",
        "config": {
            "data": a.data.data.display().to_string(),
            "y_col": a.data.y_col,
            "t_col": a.data.t_col,
            "score_col": score_col,
            "x_cols": a.x_cols,
            "trainer": to_value(&trainer),
            "k": a.k,
            "folds": a.folds,
            "level": a.level,
            "n_mc": a.n_mc,
            "seed": a.seed,
            "threads": a.output.threads,
        },
        "n": d.n(),
        "fold_size": r.result.folds.m,
        "tau": tau,
        "ate": r.result.ate_hat,
        "level": r.level,
        "groups": estimate_rows(tau, &r.variance.variance, &r.ci_lo, &r.ci_hi, &r.variance.floored),
        "variance_components": to_value(&r.variance),
        "per_fold": folds,
        "warnings": warnings,
        "sigma": sigma_json(&r.sigma),
        "tests": { "heterogeneity": test_json(&r.het), "rank_consistency": test_json(&r.rank) },
    });
    emit(report, a.output.out.as_deref())
}

pub fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mode = match a.mode {
        Mode::Heterogeneous => EffectMode::Heterogeneous,
        Mode::Homogeneous => EffectMode::Homogeneous,
    };
    let scoring = match a.folds {
        Some(folds) => {
            let trainer = builtin_trainer(&a.trainer)?;
            SimScoring::CrossFit {
                trainer,
                folds,
                truth_reps: a.truth_reps,
            }
        }
        None => SimScoring::Fixed {
            rule: if a.score == "cate" {
                ScoreRule::TrueCate
            } else {
                ScoreRule::Covariate(a.score.clone())
            },
        },
    };
    let mut dgp = DgpSpec::new(a.n, mode);
    dgp.noise_sd = a.noise_sd;
    let mut cfg = SimConfig::new(dgp, scoring, a.k, a.trials, a.seed);
    cfg.level = a.level;
    cfg.alpha = a.alpha;
    cfg.rank_draws = a.rank_draws;
    cfg.truth_draws = a.truth_draws;
    cfg.threads = a.output.threads;
    if cfg.threads == Some(0) {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    let r = run_simulation(&cfg)?;

    eprintln!(
        "{} trials ({} failed), n = {}, K = {}",
        r.completed_trials, r.failed_trials, a.n, a.k
    );
    for g in &r.groups {
        eprintln!(
            "  group {:>2}: truth {:>9.4}  bias {:>8.4}  sd {:>8.4}  coverage {:.3}",
            g.k, g.truth, g.bias, g.sd, g.coverage
        );
    }
    for t in &r.tests {
        eprintln!("  {}: rejection {:.3}, median p {:.4}", t.test, t.rejection_rate, t.median_p);
    }
    if let Some(path) = &a.csv {
        std::fs::write(path, r.groups_csv()).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    }

    let mut report = to_value(&r);
    report["command"] = json!("simulate");
    emit(report, a.output.out.as_deref())
}

pub fn bias_bound(a: BiasBoundArgs) -> Result<(), CliError> {
    let bound = core_bias_bound(a.n, a.k, a.group, a.epsilon, a.m_k, a.m_km1)?;
    eprintln!("P(|bias of group {}| >= {}) <= {bound:.6}", a.group, a.epsilon);
    let report = json!({
        "command": "bias-bound",
        "config": {
            "n": a.n,
            "k": a.k,
            "group": a.group,
            "epsilon": a.epsilon,
            "m_k": a.m_k,
            "m_km1": a.m_km1,
        },
        "bound": bound,
    });
    emit(report, a.out.as_deref())
}

fn parse_rows<'a>(rows: impl Iterator<Item = &'a str>, what: &str) -> Result<Vec<Vec<f64>>, CliError> {
    rows.map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|r| {
            r.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::usage(format!("{what}: `{}` is not a number", v.trim())))
                })
                .collect()
        })
        .collect()
}

fn read_sigma(v: &VectorArgs) -> Result<Vec<Vec<f64>>, CliError> {
    match (&v.sigma, &v.sigma_file) {
        (Some(s), _) => parse_rows(s.split(';'), "--sigma"),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError {
                code: 2,
                kind: "io",
                message: format!("{}: {e}", path.display()),
            })?;
            parse_rows(text.lines(), "--sigma-file")
        }
        (None, None) => Err(CliError::usage("one of --sigma or --sigma-file is required")),
    }
}

fn cov_from_args(v: &VectorArgs) -> Result<CovMatrix, CliError> {
    let rows = read_sigma(v)?;
    let k = v.tau.len();
    if k == 0 {
        return Err(CliError::usage("--tau needs at least one value"));
    }
    if rows.len() != k || rows.iter().any(|r| r.len() != k) {
        return Err(CliError::usage(format!("covariance must be {k} x {k} to match --tau")));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let m = matrix_from_rows(k, flat);
    let cov = if v.centered {
        CovMatrix::for_centered(m, v.pd_floor)?
    } else {
        CovMatrix::from_matrix(m, v.pd_floor)?
    };
    Ok(cov)
}

fn vector_config(v: &VectorArgs) -> Value {
    json!({
        "tau": v.tau,
        "ate": v.ate,
        "sigma": v.sigma,
        "sigma_file": v.sigma_file.as_ref().map(|p| p.display().to_string()),
        "centered": v.centered,
        "pd_floor": v.pd_floor,
    })
}

pub fn het_test(a: HetTestArgs) -> Result<(), CliError> {
    let sigma = cov_from_args(&a.input)?;
    let t = core_het_test(&a.input.tau, a.input.ate, &sigma)?;
    eprintln!("heterogeneity: statistic {:.4}, p = {:.4}", t.statistic, t.p_value);
    let report = json!({
        "command": "het-test",
        "config": vector_config(&a.input),
        "sigma": sigma_json(&sigma),
        "test": test_json(&t),
    });
    emit(report, a.out.as_deref())
}

pub fn rank_test(a: RankTestArgs) -> Result<(), CliError> {
    let sigma = cov_from_args(&a.input)?;
    let t = with_threads(a.output.threads, || core_rank_test(&a.input.tau, a.input.ate, &sigma, a.n_mc, a.seed))??;
    eprintln!("rank consistency: statistic {:.4}, p = {:.4}", t.statistic, t.p_value);
    let mut config = vector_config(&a.input);
    config["n_mc"] = json!(a.n_mc);
    config["seed"] = json!(a.seed);
    config["threads"] = json!(a.output.threads);
    let report = json!({
        "command": "rank-test",
        "config": config,
        "sigma": sigma_json(&sigma),
        "test": test_json(&t),
    });
    emit(report, a.output.out.as_deref())
}

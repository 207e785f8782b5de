use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, ExperimentDataset};
use crate::error::{Error, Result};
use crate::numerics::least_squares;

/// How a scoring rule is obtained from training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainerSpec {
    /// Per-arm least squares on `(1, x)`; score is the fitted difference.
    LinearTLearner,
    /// Subprocess speaking the file protocol described on [`score_via_external`].
    External {
        program: String,
        args: Vec<String>,
        timeout_secs: u64,
    },
    /// Ignores training data; the score is one covariate column.
    Covariate { column: String },
    /// Ignores training data; uses the evaluation rows' own score column.
    Precomputed,
}

/// Scores for one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub scores: Vec<f64>,
    pub rank_deficient: bool,
}

impl TrainerSpec {
    pub fn needs_covariates(&self) -> bool {
        !matches!(self, TrainerSpec::Precomputed)
    }

    pub fn score(&self, train: &ExperimentDataset, eval: &ExperimentDataset, seed: u64) -> Result<Scored> {
        match self {
            TrainerSpec::LinearTLearner => {
                let model = train_linear_tlearner(train)?;
                let x = eval
                    .covariates()
                    .ok_or_else(|| Error::Trainer { fold: None, message: "evaluation rows have no covariates".into() })?;
                Ok(Scored {
                    scores: model.predict(x)?,
                    rank_deficient: model.rank_deficient,
                })
            }
            TrainerSpec::External {
                program,
                args,
                timeout_secs,
            } => Ok(Scored {
                scores: score_via_external(program, args, Duration::from_secs(*timeout_secs), train, eval, seed)?,
                rank_deficient: false,
            }),
            TrainerSpec::Covariate { column } => {
                let x = eval
                    .covariates()
                    .ok_or_else(|| Error::Trainer { fold: None, message: "evaluation rows have no covariates".into() })?;
                let j = x.column_index(column).ok_or_else(|| Error::Trainer {
                    fold: None,
                    message: format!("no covariate named `{column}`"),
                })?;
                Ok(Scored {
                    scores: x.column(j),
                    rank_deficient: false,
                })
            }
            TrainerSpec::Precomputed => Ok(Scored {
                scores: eval
                    .score()
                    .ok_or_else(|| Error::Trainer { fold: None, message: "evaluation rows have no score column".into() })?
                    .to_vec(),
                rank_deficient: false,
            }),
        }
    }
}

/// Fitted arm-specific linear outcome models.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTLearner {
    pub treated: DVector<f64>,
    pub control: DVector<f64>,
    pub rank_deficient: bool,
}

impl LinearTLearner {
    pub fn predict(&self, x: &Covariates) -> Result<Vec<f64>> {
        if x.ncols() + 1 != self.treated.len() {
            return Err(Error::Trainer {
                fold: None,
                message: format!("model has {} covariates, data has {}", self.treated.len() - 1, x.ncols()),
            });
        }
        Ok((0..x.nrows())
            .map(|i| {
                let row = x.row(i);
                let f = |b: &DVector<f64>| b[0] + row.iter().zip(b.iter().skip(1)).map(|(v, c)| v * c).sum::<f64>();
                f(&self.treated) - f(&self.control)
            })
            .collect())
    }
}

pub fn train_linear_tlearner(train: &ExperimentDataset) -> Result<LinearTLearner> {
    let x = train
        .covariates()
        .ok_or_else(|| Error::Trainer { fold: None, message: "training rows have no covariates".into() })?;
    let p = x.ncols();
    let fit_arm = |arm: bool| -> Result<(DVector<f64>, bool)> {
        let rows = train.arm_indices(arm);
        if rows.len() <= p + 1 {
            return Err(Error::Trainer {
                fold: None,
                message: format!(
                    "{} arm has {} units; more than {} are needed for {p} covariates",
                    if arm { "treated" } else { "control" },
                    rows.len(),
                    p + 1
                ),
            });
        }
        let design = DMatrix::from_fn(rows.len(), p + 1, |r, j| if j == 0 { 1.0 } else { x.row(rows[r])[j - 1] });
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| train.y()[i]));
        let fit = least_squares(&design, &y)?;
        Ok((fit.coefficients, fit.rank_deficient))
    };
    let (treated, rd1) = fit_arm(true)?;
    let (control, rd0) = fit_arm(false)?;
    Ok(LinearTLearner {
        treated,
        control,
        rank_deficient: rd1 || rd0,
    })
}

fn write_frame(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

fn trainer_error(message: impl Into<String>) -> Error {
    Error::Trainer {
        fold: None,
        message: message.into(),
    }
}

/// Runs `<program> [args] --train <csv> --eval <csv> --out <csv> --seed <u64>`.
///
/// The training CSV has columns `y,t,<covariates>`; the evaluation CSV has the
/// covariate columns only. The program must write a CSV with the single
/// header `score` and one value per evaluation row, in order.
pub fn score_via_external(
    program: &str,
    args: &[String],
    timeout: Duration,
    train: &ExperimentDataset,
    eval: &ExperimentDataset,
    seed: u64,
) -> Result<Vec<f64>> {
    let (tx, ex) = match (train.covariates(), eval.covariates()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(trainer_error("external trainers need covariates")),
    };
    let dir = tempfile::tempdir()?;
    let train_path = dir.path().join("train.csv");
    let eval_path = dir.path().join("eval.csv");
    let out_path = dir.path().join("scores.csv");

    let mut header = vec!["y".to_string(), "t".to_string()];
    header.extend(tx.names().iter().cloned());
    write_frame(
        &train_path,
        &header,
        (0..train.n()).map(|i| {
            let mut row = vec![train.y()[i], if train.treated()[i] { 1.0 } else { 0.0 }];
            row.extend_from_slice(tx.row(i));
            row
        }),
    )?;
    write_frame(&eval_path, ex.names(), (0..eval.n()).map(|i| ex.row(i).to_vec()))?;

    let mut child = Command::new(program)
        .args(args)
        .arg("--train")
        .arg(&train_path)
        .arg("--eval")
        .arg(&eval_path)
        .arg("--out")
        .arg(&out_path)
        .arg("--seed")
        .arg(seed.to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| trainer_error(format!("could not start `{program}`: {e}")))?;
    let mut stderr = child.stderr.take().expect("stderr is piped");
    let reader = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stderr.read_to_string(&mut buf);
        buf
    });

    let start = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Err(trainer_error(format!("`{program}` timed out after {}s", timeout.as_secs_f64())));
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let err_text = reader.join().unwrap_or_default();
    if !status.success() {
        return Err(trainer_error(format!("`{program}` exited with {status}: {}", err_text.trim())));
    }

    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&out_path)
        .map_err(|e| trainer_error(format!("could not read trainer output: {e}")))?;
    let headers = rdr.headers()?.clone();
    if headers.len() != 1 || &headers[0] != "score" {
        return Err(trainer_error(format!(
            "trainer output header must be `score`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut scores = Vec::with_capacity(eval.n());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let raw = rec.get(0).unwrap_or("");
        let v: f64 = raw
            .parse()
            .map_err(|_| trainer_error(format!("trainer output row {}: `{raw}` is not a number", r + 1)))?;
        if !v.is_finite() {
            return Err(trainer_error(format!("trainer output row {} is not finite", r + 1)));
        }
        scores.push(v);
    }
    if scores.len() != eval.n() {
        return Err(trainer_error(format!(
            "trainer wrote {} scores for {} evaluation rows",
            scores.len(),
            eval.n()
        )));
    }
    Ok(scores)
}

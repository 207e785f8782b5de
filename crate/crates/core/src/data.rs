//! Experiment data: representation, CSV ingestion, validation, and stratified folds.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Stream id reserved for fold shuffling, so fold draws never collide with
/// other consumers of the same seed.
const FOLD_STREAM: u64 = 0xf01d;

/// Row-major covariate matrix with column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    names: Vec<String>,
    values: Vec<f64>,
}

impl Covariates {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Validation("covariate matrix needs at least one column".into()));
        }
        if !values.len().is_multiple_of(names.len()) {
            return Err(Error::Validation(format!(
                "{} covariate values do not fill rows of {} columns",
                values.len(),
                names.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "covariate at row {}, column `{}` is not finite",
                pos / names.len() + 1,
                names[pos % names.len()]
            )));
        }
        Ok(Covariates { names, values })
    }

    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let p = names.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != p) {
            return Err(Error::Validation(format!(
                "covariate row {} has {} values, expected {p}",
                bad + 1,
                rows[bad].len()
            )));
        }
        Covariates::new(names, rows.concat())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ncols(&self) -> usize {
        self.names.len()
    }

    pub fn nrows(&self) -> usize {
        self.values.len() / self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.ncols();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.nrows()).map(|i| self.row(i)[j]).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn select_rows(&self, indices: &[usize]) -> Covariates {
        let mut values = Vec::with_capacity(indices.len() * self.ncols());
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Covariates {
            names: self.names.clone(),
            values,
        }
    }
}

/// One completely randomized sample.
///
/// Row order is meaningful: it is the tie-break key when ranking scores and
/// the order used by trimming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDataset {
    y: Vec<f64>,
    treated: Vec<bool>,
    score: Option<Vec<f64>>,
    covariates: Option<Covariates>,
}

impl ExperimentDataset {
    pub fn new(
        y: Vec<f64>,
        treated: Vec<bool>,
        score: Option<Vec<f64>>,
        covariates: Option<Covariates>,
    ) -> Result<Self> {
        let n = y.len();
        if treated.len() != n {
            return Err(Error::Validation(format!(
                "{n} outcomes but {} treatment indicators",
                treated.len()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("outcome at row {} is not finite", i + 1)));
        }
        if let Some(s) = &score {
            if s.len() != n {
                return Err(Error::Validation(format!("{n} outcomes but {} scores", s.len())));
            }
            if let Some(i) = s.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("score at row {} is not finite", i + 1)));
            }
        }
        if let Some(x) = &covariates {
            if x.nrows() != n {
                return Err(Error::Validation(format!(
                    "{n} outcomes but {} covariate rows",
                    x.nrows()
                )));
            }
        }
        let n1 = treated.iter().filter(|&&t| t).count();
        if n1 == 0 || n1 == n {
            return Err(Error::Validation(format!(
                "both arms must be nonempty (n = {n}, treated = {n1})"
            )));
        }
        Ok(ExperimentDataset {
            y,
            treated,
            score,
            covariates,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n1(&self) -> usize {
        self.treated.iter().filter(|&&t| t).count()
    }

    pub fn n0(&self) -> usize {
        self.n() - self.n1()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn treated(&self) -> &[bool] {
        &self.treated
    }

    pub fn score(&self) -> Option<&[f64]> {
        self.score.as_deref()
    }

    pub fn covariates(&self) -> Option<&Covariates> {
        self.covariates.as_ref()
    }

    /// Returns a copy with the score column replaced.
    pub fn with_score(&self, score: Vec<f64>) -> Result<Self> {
        ExperimentDataset::new(
            self.y.clone(),
            self.treated.clone(),
            Some(score),
            self.covariates.clone(),
        )
    }

    /// Returns a copy with every outcome transformed by `f`.
    pub fn map_outcomes(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        ExperimentDataset::new(
            self.y.iter().map(|&v| f(v)).collect(),
            self.treated.clone(),
            self.score.clone(),
            self.covariates.clone(),
        )
    }

    /// The rows at `indices`, in the order given.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {} rows",
                self.n()
            )));
        }
        ExperimentDataset::new(
            indices.iter().map(|&i| self.y[i]).collect(),
            indices.iter().map(|&i| self.treated[i]).collect(),
            self.score
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
            self.covariates.as_ref().map(|x| x.select_rows(indices)),
        )
    }

    /// Indices of units in the given arm, ascending.
    pub fn arm_indices(&self, treated: bool) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.treated[i] == treated).collect()
    }
}

/// Which CSV columns hold covariates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum CovariateColumns {
    #[default]
    None,
    Named(Vec<String>),
    /// Every column not used for outcome, treatment, or score.
    Remaining,
}

/// Column-name mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSchema {
    pub y: String,
    pub t: String,
    pub score: Option<String>,
    pub covariates: CovariateColumns,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            y: "y".into(),
            t: "t".into(),
            score: None,
            covariates: CovariateColumns::None,
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<ExperimentDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: Read>(reader: R, schema: &ColumnSchema) -> Result<ExperimentDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}` (found: {})", headers.join(", "))))
    };
    let y_idx = find(&schema.y)?;
    let t_idx = find(&schema.t)?;
    let score_idx = schema.score.as_deref().map(find).transpose()?;
    let x_idx: Vec<usize> = match &schema.covariates {
        CovariateColumns::None => Vec::new(),
        CovariateColumns::Named(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        CovariateColumns::Remaining => (0..headers.len())
            .filter(|&j| j != y_idx && j != t_idx && Some(j) != score_idx)
            .collect(),
    };

    let mut y = Vec::new();
    let mut treated = Vec::new();
    let mut score = Vec::new();
    let mut x = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record?;
        let cell = |j: usize| -> Result<f64> {
            let raw = record.get(j).unwrap_or("");
            if raw.is_empty() {
                return Err(Error::Parse {
                    row,
                    column: headers[j].clone(),
                    message: "missing value".into(),
                });
            }
            raw.parse::<f64>().map_err(|e| Error::Parse {
                row,
                column: headers[j].clone(),
                message: format!("`{raw}` is not a number ({e})"),
            })
        };
        y.push(cell(y_idx)?);
        let t = cell(t_idx)?;
        if t == 1.0 {
            treated.push(true);
        } else if t == 0.0 {
            treated.push(false);
        } else {
            return Err(Error::Validation(format!(
                "row {row}: treatment `{}` must be 0 or 1",
                record.get(t_idx).unwrap_or("")
            )));
        }
        if let Some(j) = score_idx {
            score.push(cell(j)?);
        }
        for &j in &x_idx {
            x.push(cell(j)?);
        }
    }
    let covariates = if x_idx.is_empty() {
        None
    } else {
        Some(Covariates::new(x_idx.iter().map(|&j| headers[j].clone()).collect(), x)?)
    };
    ExperimentDataset::new(y, treated, score_idx.map(|_| score), covariates)
}

/// Writes the dataset as CSV: `y,t[,score][,covariates...]`. Floats are
/// written in shortest round-trip form.
pub fn write_dataset<W: Write>(d: &ExperimentDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["y".to_string(), "t".to_string()];
    if d.score.is_some() {
        header.push("score".into());
    }
    if let Some(x) = &d.covariates {
        header.extend(x.names.iter().cloned());
    }
    wtr.write_record(&header)?;
    for i in 0..d.n() {
        let mut rec = vec![d.y[i].to_string(), if d.treated[i] { "1" } else { "0" }.to_string()];
        if let Some(s) = &d.score {
            rec.push(s[i].to_string());
        }
        if let Some(x) = &d.covariates {
            rec.extend(x.row(i).iter().map(f64::to_string));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_dataset(d: &ExperimentDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_dataset(d, file)
}

/// Checks that `k` divides both arm sizes.
pub fn validate_for_gates(d: &ExperimentDataset, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("group count K = {k} must be at least 2")));
    }
    let (n1, n0) = (d.n1(), d.n0());
    if n1 % k != 0 || n0 % k != 0 {
        return Err(Error::Divisibility {
            n1,
            n0,
            divisor: k,
            what: "group count",
        });
    }
    Ok(())
}

/// Result of trimming a dataset to satisfy divisibility.
#[derive(Debug, Clone)]
pub struct Trimmed {
    pub dataset: ExperimentDataset,
    /// Original row indices that were dropped, ascending.
    pub dropped: Vec<usize>,
}

/// Drops the highest-indexed units of each arm until both arm sizes are
/// multiples of `k`. Relative order of the kept rows is unchanged.
pub fn trim_for_divisibility(d: &ExperimentDataset, k: usize) -> Result<Trimmed> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("group count K = {k} must be at least 2")));
    }
    let mut dropped = Vec::new();
    for arm in [true, false] {
        let idx = d.arm_indices(arm);
        let excess = idx.len() % k;
        if idx.len() - excess == 0 {
            return Err(Error::Divisibility {
                n1: d.n1(),
                n0: d.n0(),
                divisor: k,
                what: "trimming would empty an arm",
            });
        }
        dropped.extend_from_slice(&idx[idx.len() - excess..]);
    }
    dropped.sort_unstable();
    let keep: Vec<usize> = (0..d.n()).filter(|i| dropped.binary_search(i).is_err()).collect();
    Ok(Trimmed {
        dataset: d.subset(&keep)?,
        dropped,
    })
}

/// Stratified assignment of units to `L` equal folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    /// Zero-based fold index per unit.
    pub fold_of: Vec<usize>,
    pub folds: usize,
    pub m: usize,
    pub m1: usize,
    pub m0: usize,
}

impl FoldAssignment {
    /// Wraps an explicit fold vector, checking that every fold has the same
    /// numbers of treated and control units.
    pub fn from_fold_of(d: &ExperimentDataset, fold_of: Vec<usize>) -> Result<Self> {
        if fold_of.len() != d.n() {
            return Err(Error::InvalidArgument(format!(
                "fold vector has length {}, dataset has {} rows",
                fold_of.len(),
                d.n()
            )));
        }
        let folds = fold_of.iter().max().map_or(0, |m| m + 1);
        if folds < 2 {
            return Err(Error::InvalidArgument("at least two folds are required".into()));
        }
        check_fold_divisibility(d, folds)?;
        let (m1, m0) = (d.n1() / folds, d.n0() / folds);
        for l in 0..folds {
            let t = (0..d.n()).filter(|&i| fold_of[i] == l && d.treated[i]).count();
            let c = (0..d.n()).filter(|&i| fold_of[i] == l && !d.treated[i]).count();
            if t != m1 || c != m0 {
                return Err(Error::Validation(format!(
                    "fold {} has {t} treated and {c} control units; expected {m1} and {m0}",
                    l + 1
                )));
            }
        }
        Ok(FoldAssignment {
            fold_of,
            folds,
            m: m1 + m0,
            m1,
            m0,
        })
    }

    /// Units in fold `l` (zero-based), ascending.
    pub fn members(&self, l: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == l).collect()
    }

    /// Units outside fold `l`, ascending.
    pub fn complement(&self, l: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != l).collect()
    }
}

fn check_fold_divisibility(d: &ExperimentDataset, folds: usize) -> Result<()> {
    if !d.n1().is_multiple_of(folds) || !d.n0().is_multiple_of(folds) {
        return Err(Error::Divisibility {
            n1: d.n1(),
            n0: d.n0(),
            divisor: folds,
            what: "fold count",
        });
    }
    Ok(())
}

/// Random stratified split: each arm is shuffled and dealt in equal blocks.
pub fn split_folds(d: &ExperimentDataset, folds: usize, seed: u64) -> Result<FoldAssignment> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("fold count L = {folds} must be at least 2")));
    }
    check_fold_divisibility(d, folds)?;
    let mut rng = RngStream::new(seed, FOLD_STREAM).rng();
    let mut fold_of = vec![0; d.n()];
    for arm in [true, false] {
        let mut idx = d.arm_indices(arm);
        idx.shuffle(&mut rng);
        let per_fold = idx.len() / folds;
        for (pos, &i) in idx.iter().enumerate() {
            fold_of[i] = pos / per_fold;
        }
    }
    Ok(FoldAssignment {
        fold_of,
        folds,
        m: d.n() / folds,
        m1: d.n1() / folds,
        m0: d.n0() / folds,
    })
}

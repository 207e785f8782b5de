use std::ops::Index;
use std::path::Path;
use std::process::ExitCode;

use gates_core::hypothesis::{CovMatrix, Reference, TestResult};
use serde_json::{json, Value};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            kind: "runtime",
            message: message.into(),
        }
    }
}

impl From<gates_core::Error> for CliError {
    fn from(e: gates_core::Error) -> Self {
        use gates_core::Error as E;
        let kind = match &e {
            E::Schema(_) => "schema",
            E::Validation(_) => "validation",
            E::Parse { .. } => "parse",
            E::Divisibility { .. } => "divisibility",
            E::UndersizedCell { .. } => "undersized_cell",
            E::InvalidArgument(_) => "invalid_argument",
            E::Numeric(_) => "numeric",
            E::Trainer { .. } => "trainer",
            E::Io(_) => "io",
            E::Csv(_) => "csv",
        };
        CliError {
            code: if e.is_input_error() { 2 } else { 3 },
            kind,
            message: e.to_string(),
        }
    }
}

/// Reports the error as JSON on stdout and a line on stderr.
pub fn fail(e: &CliError) -> ExitCode {
    let body = json!({
        "schema_version": SCHEMA_VERSION,
        "error": { "kind": e.kind, "message": e.message, "exit_code": e.code },
    });
    println!("{body}");
    eprintln!("error: {}", e.message.trim_end());
    ExitCode::from(e.code)
}

/// Writes the report to `out` or stdout. Keys come out sorted because
/// `serde_json::Map` is ordered.
pub fn emit(mut report: Value, out: Option<&Path>) -> Result<(), CliError> {
    if let Value::Object(map) = &mut report {
        map.insert("schema_version".into(), json!(SCHEMA_VERSION));
        map.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::runtime(e.to_string()))?;
    match out {
        Some(path) => std::fs::write(path, text + "\n").map_err(|e| CliError::runtime(format!("{}: {e}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn test_json(t: &TestResult) -> Value {
    let mut v = json!({
        "statistic": t.statistic,
        "p_value": t.p_value,
        "method": t.method,
    });
    match t.reference {
        Reference::ChiSquare { df } => {
            v["reference"] = json!("chi_square");
            v["df"] = json!(df);
        }
        Reference::ChiBarMonteCarlo { draws, std_error } => {
            v["reference"] = json!("chi_bar_square_monte_carlo");
            v["draws"] = json!(draws);
            v["mc_std_error"] = json!(std_error);
        }
    }
    v
}

fn matrix_json<M: Index<(usize, usize), Output = f64>>(m: &M, dim: usize) -> Value {
    json!((0..dim).map(|i| (0..dim).map(|j| m[(i, j)]).collect::<Vec<f64>>()).collect::<Vec<_>>())
}

pub fn sigma_json(s: &CovMatrix) -> Value {
    json!({
        "estimate": matrix_json(&s.raw, s.dim()),
        "used": matrix_json(&s.sigma, s.dim()),
        "repaired": s.repaired,
        "centered": s.centered,
        "pd_floor": s.pd_floor,
    })
}

/// Rows of per-group estimates.
pub fn estimate_rows(tau: &[f64], var: &[f64], lo: &[f64], hi: &[f64], floored: &[bool]) -> Value {
    json!((0..tau.len())
        .map(|k| json!({
            "group": k + 1,
            "tau": tau[k],
            "variance": var[k],
            "std_error": var[k].sqrt(),
            "ci_lo": lo[k],
            "ci_hi": hi[k],
            "variance_floored": floored[k],
        }))
        .collect::<Vec<_>>())
}

pub fn summarize_estimates(title: &str, tau: &[f64], var: &[f64], lo: &[f64], hi: &[f64]) {
    eprintln!("{title}");
    for k in 0..tau.len() {
        eprintln!(
            "  group {:>2}: {:>10.4}  se {:>8.4}  [{:.4}, {:.4}]",
            k + 1,
            tau[k],
            var[k].sqrt(),
            lo[k],
            hi[k]
        );
    }
}

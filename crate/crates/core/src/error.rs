use thiserror::Error;

/// Treatment arm of a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Treated,
    Control,
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arm::Treated => f.write_str("treated"),
            Arm::Control => f.write_str("control"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at data row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("n1 = {n1} and n0 = {n0} must both be multiples of {divisor} ({what})")]
    Divisibility {
        n1: usize,
        n0: usize,
        divisor: usize,
        what: &'static str,
    },

    #[error("group {group} has {count} {arm} units; at least {required} are required")]
    UndersizedCell {
        group: usize,
        arm: Arm,
        count: usize,
        required: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("trainer failed{}: {message}", fold.map(|f| format!(" on fold {}", f + 1)).unwrap_or_default())]
    Trainer {
        fold: Option<usize>,
        message: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by the caller's input rather than by a failure while computing.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Validation(_)
                | Error::Parse { .. }
                | Error::Divisibility { .. }
                | Error::UndersizedCell { .. }
                | Error::InvalidArgument(_)
                | Error::Csv(_)
        )
    }

    pub(crate) fn trainer_on_fold(self, fold: usize) -> Error {
        match self {
            Error::Trainer { message, .. } => Error::Trainer {
                fold: Some(fold),
                message,
            },
            other => Error::Trainer {
                fold: Some(fold),
                message: other.to_string(),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

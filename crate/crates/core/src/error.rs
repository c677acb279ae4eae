use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid price range for {ticker} on {date}: high={high}, low={low}")]
    InvalidRange {
        date: NaiveDate,
        ticker: String,
        high: f64,
        low: f64,
    },

    #[error("zero-range day for {ticker} on {date}: volatility proxy is zero and its log is undefined")]
    ZeroRange { date: NaiveDate, ticker: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("duplicate record for ({date}, {ticker})")]
    DuplicateRecord { date: NaiveDate, ticker: String },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("ambiguous leading component: top eigenvalues {first} and {second} coincide")]
    AmbiguousComponent { first: f64, second: f64 },

    #[error("parameter constraints violated: {}", format_violations(.0))]
    Constraints(Vec<Violation>),

    #[error("covariance not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("singular Hessian (condition number {condition:e})")]
    SingularHessian { condition: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by fitting, simulation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("bread matrix is singular (pivot {pivot:.3e} below threshold)")]
    SingularBread { pivot: f64 },

    #[error("negative variance {0}")]
    NegativeVariance(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("logit link requires a fitted outcome model")]
    MissingOutcomeModel,

    #[error("value outside the domain of the link: {0}")]
    DomainError(String),

    #[error("logistic fit did not converge (separation suspected) after {iterations} iterations")]
    Separation { iterations: usize },

    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("unsupported combination: {0}")]
    UnsupportedCombination(String),

    #[error("weak instrument: |cov(X, Z)| = {0:.3e}")]
    WeakInstrument(f64),

    #[error("calibration target unreachable: {0}")]
    Unreachable(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    ParseError {
        row: usize,
        column: String,
        message: String,
    },

    #[error("no data rows in {0}")]
    EmptyData(PathBuf),

    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

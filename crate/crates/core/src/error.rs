use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Who went bankrupt during a backtest step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Culprit {
    Portfolio,
    Agent(usize),
}

impl std::fmt::Display for Culprit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Culprit::Portfolio => write!(f, "portfolio"),
            Culprit::Agent(n) => write!(f, "agent {n}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("duplicate timestamp {timestamp} for ticker {ticker}")]
    DuplicateTimestamp { ticker: String, timestamp: String },

    #[error("need at least 2 periods to form price relatives, got {0}")]
    EmptyMatrix(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("covariance is singular after regularisation (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("bankruptcy of {culprit} at period {period}: growth factor {growth}")]
    Bankruptcy {
        culprit: Culprit,
        period: usize,
        growth: f64,
    },

    #[error("mixture normaliser is zero")]
    ZeroNormaliser,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(
        "simplex grid with {points} points is too large; reduce the resolution or the asset count"
    )]
    GridTooLarge { points: u128 },

    #[error("empty sample")]
    EmptySample,
}

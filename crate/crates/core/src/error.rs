use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// A record violates a model invariant; `record` names the offender.
    #[error("invalid {record}: {message}")]
    Validation { record: String, message: String },

    #[error("time {t} outside horizon [{start}, {end}]")]
    OutsideHorizon { t: f64, start: f64, end: f64 },

    #[error("no profile for {key}")]
    MissingProfile { key: String },

    #[error("unknown scenario shape {0:?}")]
    UnknownShape(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    /// Some slack or inequality multiplier left the strict interior.
    #[error("state not strictly interior: {block}[{index}] = {value}")]
    NonInterior {
        block: &'static str,
        index: usize,
        value: f64,
    },

    #[error("singular system in {context} (condition estimate {condition:.3e})")]
    Singular { context: String, condition: f64 },

    #[error(
        "no convergence after {iterations} iterations (kkt error {kkt_error:.3e}, gap {gap:.3e})"
    )]
    MaxIterations {
        iterations: usize,
        kkt_error: f64,
        gap: f64,
    },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn validation(record: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            record: record.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input rather than a numerical failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse { .. }
                | Error::Validation { .. }
                | Error::OutsideHorizon { .. }
                | Error::MissingProfile { .. }
                | Error::UnknownShape(_)
                | Error::InvalidArgument(_)
        )
    }
}

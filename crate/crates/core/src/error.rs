//! Crate-wide error type, grouped by how the caller should react.

use thiserror::Error;

/// Failure classes surfaced by the library.
///
/// The split mirrors the process exit codes of the command line tool:
/// configuration problems, numerical breakdowns, and dataset problems are
/// reported separately so scripts can react to each.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad preset, shape mismatch in a
    /// config file, missing checkpoint field).
    #[error("config: {0}")]
    Config(String),

    /// Numerical failure: non-finite values, diverged optimization, or an
    /// estimator that lost too many chains.
    #[error("numerical: {0}")]
    Numerical(String),

    /// Dataset could not be read or failed validation.
    #[error("dataset: {0}")]
    Dataset(String),

    /// Underlying I/O failure outside dataset loading (checkpoints, reports).
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure for configs, checkpoints, or reports.
    #[error("serde: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the command line tool maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Serde(_) => 2,
            Error::Numerical(_) => 3,
            Error::Dataset(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

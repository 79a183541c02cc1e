//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// `Config` -> 2, `Divergence` -> 3, `Io`/`Csv` -> 4.
#[derive(Debug, Error)]
pub enum FedError {
    /// Invalid configuration or schema violation. The message names the
    /// offending field path when one exists.
    #[error("config error: {0}")]
    Config(String),

    /// Domain error on an operation's inputs (mismatched layouts, empty
    /// batches, weights that sum to zero, and similar).
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite state detected while running a federation.
    #[error("divergence at round {round}: {what}")]
    Divergence { round: usize, what: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// CSV ingestion failure with a 1-based (row, column) location.
    #[error("csv error at row {row}, column {col}: {msg}")]
    Csv { row: usize, col: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, FedError>;

impl FedError {
    pub fn config(msg: impl Into<String>) -> Self {
        FedError::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        FedError::Domain(msg.into())
    }
}

//! Crate-wide error type with process exit-code mapping.

use thiserror::Error;

/// Errors surfaced by library operations and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: schema violations, unknown keys, bad ranges,
    /// malformed expressions, inconsistent chart/field combinations.
    #[error("config error: {0}")]
    Config(String),

    /// Numerical failure: solver divergence, degenerate metric blocks,
    /// NaNs in evolving fields, CFL/step-size violations.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Integrity failure: checksum mismatch, malformed field files,
    /// missing referenced runs.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code contract: 0 success, 2 config, 3 numeric, 4 integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            Error::Integrity(_) | Error::Io(_) => 4,
        }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.
//!
//! Variants are grouped by how a caller should react: bad caller input,
//! malformed data on disk, or a numerical failure at runtime. The CLI maps
//! these groups onto distinct process exit codes.

use thiserror::Error;

/// Errors produced by the core pipeline.
#[derive(Debug, Error)]
pub enum CoreError {
    /// An argument or configuration value violates a documented precondition
    /// (non-positive dt, mismatched provider length, invalid network shape...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A data file could not be parsed. Carries enough location info to find
    /// the offending line.
    #[error("parse error in {file} (line {line}): {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    /// Files parsed individually but disagree with each other (e.g. the
    /// timestamp file and the per-frame data directory have different counts).
    #[error("structural error: {0}")]
    Structural(String),

    /// A container/checkpoint had the wrong magic or an unsupported version.
    #[error("format error: {0}")]
    Format(String),

    /// A numerical quantity that must be finite was not.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training aborted because the loss went non-finite.
    #[error(
        "non-finite training loss at epoch {epoch}, window starting at sample \
         {window_start} (last gradient norm {grad_norm:.6e})"
    )]
    NonFiniteLoss {
        epoch: usize,
        window_start: usize,
        grad_norm: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Convenient alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CoreError>;

//! Crate-wide error type.
//!
//! Variants are grouped by failure class so downstream consumers (notably the
//! CLI) can map them onto process exit codes without string matching:
//! non-convergence, regularity breakdowns, and input validation each carry
//! their own variant.

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Expression text failed to lex or parse. `offset` is a byte offset;
    /// expressions are single-line, so column = offset + 1.
    #[error("parse error at column {}: {msg}", offset + 1)]
    Parse { msg: String, offset: usize },

    /// An identifier in an expression is not a declared variable or parameter.
    #[error("unknown identifier `{name}` at column {}; declared: {declared}", offset + 1)]
    UnknownIdentifier {
        name: String,
        offset: usize,
        declared: String,
    },

    /// Evaluation produced NaN or infinity.
    #[error("non-finite evaluation: {0}")]
    NonFinite(String),

    /// Dimension or shape mismatch between caller data and a field/chart.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A matrix that must be invertible for the requested operation is
    /// singular to working precision.
    #[error("regularity failure in {context}: min singular value {min_sv:.3e}")]
    Regularity { context: String, min_sv: f64 },

    /// An iterative solver ran out of iterations or stalled.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e}): {context}")]
    NonConvergence {
        context: String,
        iterations: usize,
        residual: f64,
    },

    /// Chart data failed structural validation.
    #[error("chart validation failed: {0}")]
    Validation(String),

    /// The operation is outside the supported envelope (documented limits).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Bad problem configuration (inconsistent sizes, missing data, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Filesystem or stream failure while reading inputs or writing
    /// artifacts.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

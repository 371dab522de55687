//! Error type shared by every module in the crate.

use thiserror::Error;

/// Unified error enum. The CLI maps variants onto process exit codes, so the
/// classification here is part of the public contract: configuration and
/// domain problems are distinct from budget refusals, cache/metadata
/// mismatches, and data-dependent estimation failures.
#[derive(Debug, Error)]
pub enum SpdeError {
    /// A constructor argument violates a documented precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An input lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    DomainError(String),

    /// Requested simulation work exceeds the configured budget.
    #[error("work budget exceeded: {work} mode-step units requested, budget {budget}; {hint}")]
    BudgetExceeded { work: u128, budget: u128, hint: String },

    /// A design matrix fails the relative singular-value rank gate. The
    /// spatial points must span a full-rank affine design (m >= d+1
    /// observations whose design matrix has full column rank).
    #[error("rank deficiency: {0}")]
    FullRankViolation(String),

    /// A variance cache does not match the requested model/settings key.
    #[error("cache mismatch: {0}")]
    CacheMismatch(String),

    /// Stored metadata disagrees with what the caller supplied.
    #[error("metadata mismatch: {0}")]
    MetadataMismatch(String),

    /// Observed data make the requested estimate undefined.
    #[error("data error: {0}")]
    DataError(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SpdeError>;

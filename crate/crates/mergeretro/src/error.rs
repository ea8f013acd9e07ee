//! Error type shared by all estimators and data loaders.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a documented invariant (bad CSV row, duplicate key,
    /// non-positive price, unbalanced pre-period block, ...).
    #[error("invalid data: {0}")]
    Validation(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The instrument/regressor cross-moment matrix is rank deficient.
    /// Carries the smallest singular value observed.
    #[error("rank deficiency in {context}: smallest singular value {min_singular:.3e}")]
    RankDeficient { context: String, min_singular: f64 },

    /// Order condition L >= K failed for a moment system.
    #[error("order condition violated: {0}")]
    OrderCondition(String),

    /// Equilibrium denominator 1 - gamma*alpha1 is singular or negative.
    #[error("singular pass-through denominator: 1 - gamma*alpha1 = {0:.3e}")]
    SingularDenominator(f64),

    /// Iterative weight solver failed to converge.
    #[error("weight solver did not converge: final gradient norm {0:.3e}")]
    NonConvergence(f64),

    /// Too many bootstrap replicates failed.
    #[error("bootstrap aborted: {failed} of {total} replicates failed (limit 10%)")]
    BootstrapAttrition { failed: usize, total: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

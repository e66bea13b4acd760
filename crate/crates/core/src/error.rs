use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimensions of two inputs disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A rate matrix failed validation.
    #[error("invalid rate matrix: {0}")]
    RateMatrix(String),

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A control or scenario left its admissible set.
    #[error("admissibility violation: {0}")]
    Admissibility(String),

    /// A simulated path produced a non-finite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An integral against a jump-size law diverged or could not be resolved.
    #[error("integral not finite: {0}")]
    NonIntegrable(String),

    /// An iterative procedure stopped before reaching its tolerance.
    #[error("no convergence: {0}")]
    Convergence(String),

    /// Configuration problems, one entry per violation.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

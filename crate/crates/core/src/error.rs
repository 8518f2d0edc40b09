//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Matrix or vector dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A parameter violates a precondition (asymmetric covariance, empty batch, ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A matrix that must be inverted or factored is numerically singular.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// An iteration left its region of validity (series divergence, loss of
    /// positive definiteness).
    #[error("divergence: {0}")]
    Diverged(String),

    /// An iterative solve ran out of passes before meeting its tolerance.
    #[error("no convergence after {passes} passes (relative residual {residual:.3e})")]
    NoConvergence { passes: usize, residual: f64 },

    /// Operation called in the wrong operating mode.
    #[error("mode error: {0}")]
    Mode(String),

    /// A control schedule has no entry for the requested time step.
    #[error("no stored control matrix for t = {0}")]
    Schedule(usize),

    /// Experiment configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

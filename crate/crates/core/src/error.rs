//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the synthesis toolkit.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Incompatible matrix or signal dimensions.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A constructor invariant was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The integrator produced a non-finite state.
    #[error("simulation diverged at t = {time:.6} s ({context})")]
    Divergence { time: f64, context: String },

    /// The QR eigenvalue iteration did not converge.
    #[error("eigenvalue iteration failed to converge for {0}")]
    EigenvalueFailure(String),

    /// A Hurwitz matrix was required.
    #[error("matrix is not Hurwitz ({context}): max real eigenvalue part = {margin:.6e}")]
    NotHurwitz { context: String, margin: f64 },

    /// A linear system arising inside a solver was singular.
    #[error("singular linear system: {0}")]
    SingularSystem(String),

    /// An experiment destabilized the closed loop.
    #[error("closed loop unstable during {sub_experiment}: diverged at t = {time:.6} s")]
    UnstableGain { sub_experiment: String, time: f64 },

    /// The initial gain failed the boundedness probe.
    #[error("initial gain does not stabilize the plant: {0}")]
    UnstableInitialization(String),

    /// A gain or direction carries a nonzero value on a constrained entry.
    #[error("structural constraint violated at ({row}, {col}): value {value:.3e}")]
    PatternViolation { row: usize, col: usize, value: f64 },

    /// Backtracking hit the minimum step without a cost decrease.
    #[error("step search failed at iteration {iteration}: no descent above the minimum step")]
    StepSearchFailed { iteration: usize },

    /// A non-finite quantity appeared in a quadrature or estimate.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// An iterative solver ran out of its iteration budget.
    #[error("{solver} did not converge within {iterations} iterations")]
    NoConvergence { solver: String, iterations: usize },

    /// The requested configuration is outside the data-driven path.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

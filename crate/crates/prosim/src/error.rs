//! Crate-wide error type.

use thiserror::Error;

/// Unified error for every stage of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// A least-squares fit had a (numerically) rank-deficient regressor.
    #[error("singular fit: condition estimate {cond:.3e} ({context})")]
    SingularFit { cond: f64, context: String },

    /// Marker geometry too degenerate to process (coincident markers, no
    /// relative rotation between bodies, ...).
    #[error("degenerate geometry: {0}")]
    Geometry(String),

    /// A signal did not contain the structure a stage looks for.
    #[error("no steps detected: {0}")]
    NoSteps(String),

    /// A constraint Jacobian or KKT matrix lost rank.
    #[error("singular constraint system: {0}")]
    SingularConstraint(String),

    /// An iterative solver ran out of iterations.
    #[error("did not converge: {context} (residual {residual:.3e} after {iterations} iterations)")]
    NoConvergence {
        context: String,
        residual: f64,
        iterations: usize,
    },

    /// A quadratic program had no feasible point.
    #[error("QP infeasible: constraint violation {violation:.3e}")]
    QpInfeasible { violation: f64 },

    /// A quadratic program was unbounded below over its feasible set.
    #[error("QP unbounded along a feasible descent ray")]
    QpUnbounded,

    /// Model playback diverged from the recorded trajectory.
    #[error("playback failure on step {step}: {reason}")]
    Playback { step: usize, reason: String },

    /// A simulated walker fell or a guard was never reached.
    #[error("simulation failure: {0}")]
    Simulation(String),

    /// Malformed or inconsistent input data.
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for [`Error::Domain`].
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

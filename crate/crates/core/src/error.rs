//! Crate-wide error type.
//!
//! Every fallible operation reports a structured error naming the offending
//! quantity; numerical blow-ups carry enough context (path/step or lattice
//! index) to reproduce them.

use thiserror::Error;

/// Errors produced by lattice construction, solvers, estimators, and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or operation was handed an argument outside its domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Two fields that must share a lattice/shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A sampled or computed field contains a non-finite entry.
    #[error("non-finite value in {context} at lattice index {index:?} (t-slice {slice})")]
    NonFinite {
        context: String,
        slice: usize,
        index: Vec<usize>,
    },

    /// The explicit part of the parabolic step violates its stability bound.
    #[error(
        "explicit-step stability ratio {ratio:.3} exceeds 1 (dt = {dt:.3e}, h = {h:.3e}); \
         increase Nt (or coarsen the coefficients)"
    )]
    CflViolation { ratio: f64, dt: f64, h: f64 },

    /// The per-step residual check of a parabolic solve failed.
    #[error("parabolic step residual {residual:.3e} exceeds {limit:.1e} at step {step}")]
    StepResidual {
        step: usize,
        residual: f64,
        limit: f64,
    },

    /// A diffusion matrix failed its ellipticity certification.
    #[error("ellipticity violated: {0}")]
    Ellipticity(String),

    /// The drift-removal solve never reached the required smallness.
    #[error(
        "smallness not reached after {doublings} lambda-doublings (last lambda = {lambda:.3e}); \
         trace: {trace:?}"
    )]
    SmallnessNotReached {
        doublings: usize,
        lambda: f64,
        trace: Vec<(f64, f64)>,
    },

    /// Fixed-point inversion of the transform failed to contract.
    #[error("transform inversion did not converge within {iters} iterations (last delta {delta:.3e})")]
    InversionDiverged { iters: usize, delta: f64 },

    /// A simulated path left the representable range.
    #[error("path {path} blew up at step {step} (|x| not finite); seed {seed}")]
    PathBlowUp { path: u64, step: usize, seed: u64 },

    /// A requested workload exceeds the configured budget.
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),

    /// Scenario validation failures (all of them, not just the first).
    #[error("scenario invalid:\n{}", .0.join("\n"))]
    ScenarioInvalid(Vec<String>),

    /// File-format violation while reading a snapshot.
    #[error("snapshot format error: {0}")]
    SnapshotFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for [`Error::InvalidParameter`].
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// Shorthand for [`Error::ShapeMismatch`].
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}

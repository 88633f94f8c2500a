use thiserror::Error;

/// Hard errors raised by the solvers. Diagnostics that are "math says no"
/// (failed assumption checks, non-converged iterations) are reported in the
/// corresponding report types instead.
#[derive(Debug, Error)]
pub enum MfgError {
    #[error("volatility is singular at t={t} (pivot {pivot:e})")]
    SingularVolatility { t: f64, pivot: f64 },

    #[error("action {action:?} lies outside the action set")]
    ActionOutsideSet { action: Vec<f64> },

    #[error("action grid is empty")]
    EmptyActionGrid,

    #[error("drift norm {value} exceeds declared bound C={bound} (path {path}, step {step})")]
    DriftBound {
        bound: f64,
        value: f64,
        path: usize,
        step: usize,
    },

    #[error("time {t} is not on the grid (dt={dt})")]
    OffGrid { t: f64, dt: f64 },

    #[error("horizon index {requested} exceeds available horizon index {available}")]
    HorizonExceeded { requested: usize, available: usize },

    #[error("ensemble horizon {available} is shorter than the certified horizon T_required={required}")]
    EnsembleTooShort { required: f64, available: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("game is not time homogeneous; {0} requires time-homogeneous coefficients")]
    NotTimeHomogeneous(&'static str),

    #[error("drift condition failed: margin {margin} < k={required} at x={witness:?}")]
    DriftConditionFailed {
        margin: f64,
        required: f64,
        witness: Vec<f64>,
    },

    #[error("enumeration budget exceeded: {needed} > {budget}")]
    BudgetExceeded { needed: u64, budget: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("non-integrable density: {0}")]
    NonIntegrable(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("unknown game `{0}`")]
    UnknownGame(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MfgError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> MfgError {
    MfgError::InvalidArgument(msg.into())
}

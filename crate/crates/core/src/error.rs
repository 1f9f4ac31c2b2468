use thiserror::Error;

#[derive(Debug, Error)]
pub enum SavError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(&'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("quadrature did not converge for mode {mode:?}: last change {achieved:e}")]
    Quadrature { mode: Vec<i64>, achieved: f64 },

    #[error("shifted nonlinear energy is not positive ({value:e}); increase the shift")]
    NonPositiveEnergy { value: f64 },

    #[error("blow-up at step {step} (t = {t}): {reason}")]
    BlowUp { step: usize, t: f64, reason: String },

    #[error("singular mode matrix at wavevector {0:?}")]
    SingularMode([i64; 3]),

    #[error("coupling matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("history too short: scheme needs {needed} levels, state has {available}")]
    History { needed: usize, available: usize },

    #[error("dense oracle limited to {limit} unknowns, got {got}")]
    DenseTooLarge { limit: usize, got: usize },

    #[error("level set is degenerate: {0}")]
    DegenerateLevelSet(&'static str),

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SavError> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> SavError {
    SavError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

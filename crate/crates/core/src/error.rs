use thiserror::Error;

pub type Result<T> = std::result::Result<T, FbsdeError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FbsdeError {
    /// Shapes or dimensions of the inputs do not conform.
    #[error("structural error: {0}")]
    Structural(String),

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A simulated state left the finite range.
    #[error("numerical blowup at step {step} on path {path}: |X| = {magnitude:e}")]
    Blowup { step: usize, path: usize, magnitude: f64 },

    /// The implicit driver step did not converge.
    #[error("implicit step failed at step {step:?} on path {path:?} after {iterations} iterations (residual {residual:e})")]
    StepFailure {
        step: Option<usize>,
        path: Option<usize>,
        iterations: usize,
        residual: f64,
    },

    /// The supplied model contradicts its declared constants.
    #[error("model inconsistency: {0}")]
    ModelInconsistency(String),
}

impl FbsdeError {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Self::Structural(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Self::Domain(msg.into())
    }

    /// Attaches step and path context to an implicit-step failure.
    pub(crate) fn at(self, step: usize, path: usize) -> Self {
        match self {
            Self::StepFailure { iterations, residual, .. } => Self::StepFailure {
                step: Some(step),
                path: Some(path),
                iterations,
                residual,
            },
            other => other,
        }
    }
}

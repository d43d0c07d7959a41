use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("wrong operation: {0}")]
    WrongOperation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("normalized margin is undefined for a zero parameter vector")]
    UndefinedMargin,
    #[error("direction is undefined for a zero vector")]
    UndefinedDirection,
    #[error("data is not linearly separable through the origin")]
    NotSeparable,
    #[error("error estimation failed: {discarded} of {total} repeats discarded")]
    EstimationFailure { discarded: usize, total: usize },
    #[error("support mismatch: target density is zero on cell {0}")]
    SupportMismatch(usize),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LabError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LabError::InvalidInput(msg.into())
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::InvalidInput(_) => "invalid_input",
            LabError::WrongOperation(_) => "wrong_operation",
            LabError::Numeric(_) => "numeric",
            LabError::InvariantViolation(_) => "invariant_violation",
            LabError::Divergence { .. } => "divergence",
            LabError::UndefinedMargin => "undefined_margin",
            LabError::UndefinedDirection => "undefined_direction",
            LabError::NotSeparable => "not_separable",
            LabError::EstimationFailure { .. } => "estimation_failure",
            LabError::SupportMismatch(_) => "support_mismatch",
            LabError::Domain(_) => "domain",
            LabError::DegenerateSample(_) => "degenerate_sample",
            LabError::Report(_) => "report",
            LabError::Io(_) => "io",
            LabError::Json(_) => "json",
            LabError::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

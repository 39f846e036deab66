use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mode {mode} out of range for order-{order} tensor")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A vector that must be normalized has zero (or non-finite) norm.
    #[error("cannot normalize a vector with norm {0}")]
    Normalization(f64),

    /// No observation carries information about the block being updated.
    #[error("degenerate update for component {component}: {reason}")]
    DegenerateUpdate { component: usize, reason: String },

    #[error("singular {dim}x{dim} system in covariate-factor update")]
    SingularSystem { dim: usize },

    #[error("candidate set exhausted after {found} of {needed} components; increase the number of restarts")]
    InsufficientCandidates { found: usize, needed: usize },

    #[error("all {} tuning fits failed", .0.len())]
    TuningFailed(Vec<String>),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by malformed inputs rather than numerical failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch(_)
                | Error::ModeOutOfRange { .. }
                | Error::InvalidParameter(_)
                | Error::EmptyInput(_)
                | Error::Format(_)
                | Error::Io(_)
                | Error::Json(_)
        )
    }

    /// Short stable identifier used in structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::ModeOutOfRange { .. } => "mode_out_of_range",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::EmptyInput(_) => "empty_input",
            Error::Normalization(_) => "normalization",
            Error::DegenerateUpdate { .. } => "degenerate_update",
            Error::SingularSystem { .. } => "singular_system",
            Error::InsufficientCandidates { .. } => "insufficient_candidates",
            Error::TuningFailed(_) => "tuning_failed",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

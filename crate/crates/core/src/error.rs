use std::path::PathBuf;

/// Errors raised anywhere in the profiling toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("backward() already ran on this tape; build a new tape")]
    BackwardTwice,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("plate {0:?} has no control rows")]
    MissingControls(String),

    #[error("checkpoint error at {param:?}: {detail}")]
    Checkpoint { param: String, detail: String },

    #[error("malformed tensor file: {0}")]
    TensorFormat(String),

    #[error("{path}: {detail}")]
    Input { path: PathBuf, detail: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("no active objective: enable at least one of cls, mse, con")]
    NoActiveObjective,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn input(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Input { path: path.into(), detail: detail.into() }
    }
}

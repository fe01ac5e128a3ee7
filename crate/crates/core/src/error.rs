use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 2]),

    #[error("non-finite gradient for parameter `{0}`, optimizer step aborted")]
    NonFiniteGradient(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("unknown modality tag `{0}` (expected one of a, v, l)")]
    UnknownModality(String),

    #[error("unknown fusion kind `{0}`")]
    UnknownFusion(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("tensor fusion needs (k+1)^3 features and is limited to k <= 16, got k = {0}")]
    TensorFusionTooLarge(usize),

    #[error("graph weights are only defined for the gfn fusion head")]
    NotGfn,

    #[error("{}: {reason}", path.display())]
    Bundle { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn bundle(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Bundle {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("gradient requested of non-scalar node with shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape is closed")]
    TapeClosed,

    #[error("unknown tape node {0}")]
    UnknownNode(usize),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("inner optimization diverged at step {step}")]
    Diverged { step: usize },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

//! Error type shared by every stage of the pipeline.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index error: {0}")]
    Index(String),

    /// A kernel produced NaN or infinity; the enclosing step is aborted.
    #[error("numeric abort in {context}: non-finite value")]
    NonFinite { context: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("ablation would leave no active expert (layer {layer}, position {position})")]
    AblationDegenerate { layer: usize, position: usize },

    #[error("expert {expert} was not active at layer {layer}, position {position}")]
    NotActivated {
        layer: usize,
        expert: usize,
        position: usize,
    },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("insufficient data: need at least {needed} records, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("allocation error: {0}")]
    Allocation(String),

    #[error("compute mismatch: {0}")]
    ComputeMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by NaN/Inf rather than by bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

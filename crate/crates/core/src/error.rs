use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric fault: non-finite value produced by {op}")]
    NumericFault { op: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("cosine similarity undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("checkpoint for epoch {0} not found")]
    MissingCheckpoint(usize),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss")]
    Diverged { epoch: usize, batch: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}

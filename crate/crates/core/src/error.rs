use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("manifest header mismatch: expected `{expected}`, found `{found}`")]
    BadHeader { expected: String, found: String },

    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("image {width}x{height} is smaller than crop size {crop}; enable `pad_small` to pad before cropping")]
    ImageTooSmall {
        width: usize,
        height: usize,
        crop: usize,
    },

    #[error("domain mismatch: model expects {expected} input, got {found}")]
    DomainMismatch { expected: String, found: String },

    #[error("validation set contains a single class; AUROC is undefined")]
    SingleClassValidation,

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("missing rows: {0:?}")]
    MissingRows(Vec<String>),

    #[error("missing checkpoints: {0:?}")]
    MissingCheckpoints(Vec<PathBuf>),

    #[error("row order mismatch at index {index}: expected image `{expected}`, found `{found}`")]
    RowOrder {
        index: usize,
        expected: String,
        found: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error: 2 config, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Diverged { .. } => 4,
            Error::Io(_) | Error::Json(_) => 1,
            _ => 3,
        }
    }
}

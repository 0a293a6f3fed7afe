use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("infeasible CTC alignment: {frames} frames cannot emit {labels} labels with {repeats} repeats")]
    InfeasibleAlignment {
        frames: usize,
        labels: usize,
        repeats: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported audio: {field} is {found}, expected {expected}")]
    UnsupportedAudio {
        field: &'static str,
        found: String,
        expected: String,
    },

    #[error("malformed weight file: {0}")]
    WeightFormat(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

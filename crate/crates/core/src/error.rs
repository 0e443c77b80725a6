use std::path::PathBuf;

use crate::probe::TrainTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("MissingManifest: no manifest.json in {0}")]
    MissingManifest(PathBuf),

    #[error("MalformedManifest: {0}")]
    MalformedManifest(String),

    #[error("ShapeMismatch: tensor `{name}` declares {expected} bytes but {file} holds {actual}")]
    ShapeMismatch {
        name: String,
        file: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("NegativeFE: fe[{row}][{col}] = {value} (feature embeddings must be thresholded)")]
    NegativeFe { row: usize, col: usize, value: f32 },

    #[error("LabelOutOfRange: label {label} at index {index} is outside [0, {num_classes})")]
    LabelOutOfRange {
        index: usize,
        label: i64,
        num_classes: usize,
    },

    #[error("NonFinite: tensor `{name}` has a NaN or infinite entry at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),

    #[error("EmptyInput: {0}")]
    EmptyInput(String),

    #[error("InvalidArgument: {0}")]
    InvalidArgument(String),

    #[error("Divergence: training loss became non-finite at epoch {epoch}")]
    Divergence { epoch: usize, trace: Box<TrainTrace> },

    #[error("IoFailure: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for input/validation problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("non-numeric value {value:?} at {path}:{line}, column {column}")]
    NonNumeric {
        path: PathBuf,
        line: usize,
        column: usize,
        value: String,
    },

    #[error("non-finite value at (sample {sample}, channel {channel}, t {t})")]
    NonFinite { sample: usize, channel: usize, t: usize },

    #[error("sample {sample} has ragged channel lengths and padding is disabled")]
    Ragged { sample: usize },

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("invalid dataset metadata: {0}")]
    Meta(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("{what} index {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("class {class} has {count} samples, fewer than the {k} folds requested")]
    TooFewSamples { class: usize, count: usize, k: usize },

    #[error("empty activation pool for layer {layer}, channel {channel}")]
    EmptyPool { layer: usize, channel: usize },

    #[error("cannot form {k} clusters from {n} vectors")]
    ClusterCount { k: usize, n: usize },

    #[error("vector length mismatch: expected {expected}, found {found}")]
    Length { expected: usize, found: usize },

    #[error("graph has no nodes")]
    EmptyGraph,

    #[error("unknown graph node {0}")]
    UnknownNode(usize),

    #[error("inconsistent provenance: {0}")]
    Provenance(String),

    #[error("training data contains a single class")]
    SingleClass,

    #[error("non-finite feature at row {row}, column {column}")]
    NonFiniteFeature { row: usize, column: usize },

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}

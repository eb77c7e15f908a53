use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor shape {shape:?} needs {expected} elements, got {actual}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("input shape mismatch: expected {expected:?}, got {actual:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid layer graph: {0}")]
    LayerGraph(String),

    #[error("class index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("layer {index} is not a conv2d layer")]
    NotConvLayer { index: usize },

    #[error("method {method} is not applicable: {reason}")]
    MethodInapplicable { method: String, reason: String },

    #[error("unsupported architecture for {method}: {reason}")]
    UnsupportedArchitecture { method: String, reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{what} map is all zeros and cannot be l1-normalized")]
    ZeroMap { what: &'static str },

    #[error("filter not applicable: {0}")]
    FilterInapplicable(Box<Error>),

    #[error("reference class {expected} does not match the unperturbed prediction {actual}")]
    ReferenceMismatch { expected: usize, actual: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss {loss} at epoch {epoch}, sample {sample}")]
    NonFiniteLoss {
        epoch: usize,
        sample: usize,
        loss: f64,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

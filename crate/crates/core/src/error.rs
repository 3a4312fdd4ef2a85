use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("index {index} out of range for {len} rows in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("no gradients have been accumulated; run backward before stepping the optimizer")]
    MissingGradients,

    #[error("degenerate frame: {0}")]
    DegenerateFrame(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown element: {0}")]
    UnknownElement(String),

    #[error("unknown residue type: {0}")]
    UnknownResidue(String),

    #[error("no valid atom pairs within the {cutoff} Å cutoff")]
    NoValidPairs { cutoff: f64 },

    #[error("non-finite force on atom {atom}")]
    NonFiniteForce { atom: usize },

    #[error("rollout diverged after t = {last_finite_time}")]
    Diverged { last_finite_time: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0} is not supported")]
    Unsupported(&'static str),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("parse error in {context} at {location}: {message}")]
    Parse {
        context: String,
        location: String,
        message: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        context: impl Into<String>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            context: context.into(),
            location: location.into(),
            message: message.into(),
        }
    }
}

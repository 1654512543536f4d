use crate::sparse_tensor::Coordinate;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("duplicate coordinate {coord:?} at rows {first} and {second}")]
    DuplicateCoordinate {
        coord: Coordinate,
        first: usize,
        second: usize,
    },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("stride mismatch: {0}")]
    Stride(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("inconsistent channels on edge {edge}: producer has {produced}, consumer expects {expected}")]
    Channels {
        edge: String,
        produced: usize,
        expected: usize,
    },

    #[error("unknown layer {0:?}")]
    UnknownLayer(String),

    #[error("layer {0:?} has no 3x3x3 spatial kernel")]
    NotSpatial(String),

    #[error("local pruning would remove every weight of layer {0:?}")]
    DegenerateLayer(String),

    #[error("gradient-based criterion needs calibration data")]
    MissingCalibration,

    #[error("layer {0:?} has no initial-weight snapshot")]
    MissingInit(String),

    #[error("training diverged at prune step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("checkpoint format error in record {record:?}: {message}")]
    Checkpoint { record: String, message: String },

    #[error("voxset format error at line {line}: {message}")]
    Voxset { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

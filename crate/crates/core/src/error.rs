use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("layout has {got} elements but only {capacity} query slots are available")]
    Capacity { got: usize, capacity: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("tape has already been consumed by a backward pass")]
    TapeReused,

    #[error("attribute constraint is unspecified")]
    UnspecifiedAttribute,

    #[error("partial layout has no constrained slots")]
    EmptyConstraint,

    #[error("layout has no elements")]
    EmptyLayout,

    #[error("metric requires at least one layout")]
    EmptySet,

    #[error("grid is {h}x{w}, metric needs at least 3x3")]
    GridTooSmall { h: usize, w: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training step {step} failed: {source}")]
    TrainStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier, used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse(_) => "ParseError",
            Error::Validation(_) => "ValidationError",
            Error::Capacity { .. } => "CapacityError",
            Error::Shape(_) => "ShapeError",
            Error::NonFinite(_) => "NonFiniteError",
            Error::NonScalarRoot(_) => "NonScalarRootError",
            Error::TapeReused => "TapeReusedError",
            Error::UnspecifiedAttribute => "UnspecifiedAttributeError",
            Error::EmptyConstraint => "EmptyConstraintError",
            Error::EmptyLayout => "EmptyLayoutError",
            Error::EmptySet => "EmptySetError",
            Error::GridTooSmall { .. } => "GridTooSmallError",
            Error::Format(_) => "FormatError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::TrainStep { .. } => "TrainStepError",
            Error::Io(_) => "IoError",
        }
    }
}

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    /// Every entry of a weighted reduction had zero weight; the caller has to
    /// fall back to something else.
    #[error("all weights are zero")]
    AllZeroWeights,

    #[error("vectors are collinear (|v1 x v2|^2 = {0:e}); no frame can be built")]
    CollinearPair(f64),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("atoms {i} and {j} are {distance:e} apart, below d_min = {d_min:e}")]
    CollidingPoints {
        i: usize,
        j: usize,
        distance: f64,
        d_min: f64,
    },

    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{count} neighbors exceed the model capacity of {capacity}")]
    TooManyNeighbors { count: usize, capacity: usize },

    #[error("parameter shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown species {0}")]
    UnknownSpecies(String),

    #[error("fully collinear environment and no fallback configured")]
    FullyCollinear,

    #[error("covariant outputs are not supported with the adaptive angular cutoff")]
    CovariantWithAdaptiveOmega,

    #[error("missing targets: {0}")]
    MissingTargets(&'static str),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }
}

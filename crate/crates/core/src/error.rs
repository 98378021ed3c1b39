use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("heading undefined: primary speed {speed} m/s is below the cutoff")]
    UndefinedHeading { speed: f64 },

    #[error("need at least {needed} observed points, got {got}")]
    InsufficientObservations { needed: usize, got: usize },

    #[error("track length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("could not place {agents} agents after {attempts} attempts")]
    Placement { agents: usize, attempts: usize },

    #[error("unknown model `{0}` (expected one of cv, kalman, sf, orca)")]
    UnknownModel(String),

    #[error("scene {0}: mode 0 carries no neighbour predictions, Col-I is undefined")]
    MissingNeighbourPredictions(i64),

    #[error("scenes without predictions: {0:?}")]
    MissingScenes(Vec<i64>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

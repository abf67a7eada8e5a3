use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("identified axis of joint {joint} is nearly perpendicular to its nominal axis (|cos| = {cos:.3e})")]
    NearPerpendicularAxes { joint: usize, cos: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("anchor basis matrix has rank 0")]
    DegenerateAnchors,

    #[error("model has no clusters")]
    EmptyModel,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("paired configurations disagree on the true relative tool position by {max_dev:.3e} mm")]
    InconsistentPairs { max_dev: f64 },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("negative weight {weight} at ({i}, {j})")]
    NegativeWeight { i: usize, j: usize, weight: f64 },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("({0}, {1}) is not an edge")]
    NotAnEdge(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("graph disconnected")]
    Disconnected,
    #[error("trivial cut: subset must be nonempty and proper")]
    TrivialCut,
    #[error("cut has zero volume on its smaller side")]
    ZeroVolume,
    #[error("graph with {0} nodes too large for brute force (max 20)")]
    TooLarge(usize),
    #[error("degenerate projection: column {0} of the projection is zero")]
    DegenerateProjection(usize),
    #[error("indefinite middle matrix")]
    IndefiniteMiddle,
    #[error("not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate coordinates")]
    DegenerateCoordinates,
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_good: Box<crate::forecaster::ModelParams>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

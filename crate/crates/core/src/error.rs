use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid boundary partition: {0}")]
    Partition(String),
    #[error("invalid mesh: {0}")]
    Mesh(String),
    #[error("deformation inverts element {element} (signed measure {measure:e})")]
    Deformation { element: usize, measure: f64 },
    #[error("coercivity lost: {0}")]
    Coercivity(String),
    #[error("requested {requested} eigenpairs but only {available} finite modes exist (rank of B = {b_rank})")]
    Rank {
        requested: usize,
        available: usize,
        b_rank: usize,
    },
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid item {id}: {reason}")]
    InvalidItem { id: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no eligible item for examinee {examinee} at slot {slot}")]
    NoEligibleItem { examinee: usize, slot: usize },

    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("cannot form {requested} strata from {distinct} distinct values")]
    DegenerateStrata { requested: usize, distinct: usize },

    #[error("term {0} is not part of the fitted model")]
    UnknownTerm(String),

    #[error("outer optimization did not converge after {evaluations} evaluations")]
    NonConvergence { evaluations: usize },

    #[error("quadrature oracle limited to {limit}; got {actual}")]
    TooLarge { limit: usize, actual: usize },

    #[error("no item survived filtering in cell {0}")]
    EmptyCell(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

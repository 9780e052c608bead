use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("unknown category id `{0}`")]
    UnknownCategory(String),

    #[error("duplicate POI id `{0}`")]
    DuplicatePoi(String),

    #[error("unknown POI id `{0}`")]
    UnknownPoi(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("POI `{poi}` is closed at timestep {timestep}")]
    Unmappable { poi: String, timestep: u32 },

    #[error("candidate set is empty")]
    EmptyCandidates,

    #[error("non-finite distance at candidate {0}")]
    NonFiniteDistance(usize),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("n-gram set too large: {size:.3e} exceeds cap {cap:.3e}; use on-the-fly mode")]
    MemoryGuard { size: f64, cap: f64 },

    #[error("enumeration refused: |S| bound {size:.3e} exceeds guard {guard:.3e}")]
    GuardExceeded { size: f64, guard: f64 },

    #[error("no n-grams of length {0} available")]
    EmptyGramSet(usize),

    #[error("trajectory cannot be made feasible within one day: {0}")]
    Unsmoothable(String),

    #[error("config: {0}")]
    Config(String),

    #[error("index format: {0}")]
    IndexFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

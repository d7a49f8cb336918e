use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("degenerate time axis: {0}")]
    DegenerateTime(String),

    #[error("knot placement failed: {0}")]
    KnotPlacement(String),

    #[error("ill-conditioned basis: {0}")]
    IllConditionedBasis(String),

    #[error("time {0} outside the basis domain [0, 1]")]
    Domain(f64),

    #[error("model specification error: {0}")]
    Spec(String),

    #[error("non-finite value during evaluation: {0}")]
    Evaluation(String),

    #[error("sampler initialization failed: {0}")]
    Initialization(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("rank-deficient loadings: eigenvalue {index} is {value:e} relative to the largest")]
    RankDeficient { index: usize, value: f64 },

    #[error("tail too short for a Pareto fit: {0} exceedances (need at least 5)")]
    InsufficientTail(usize),

    #[error("degenerate tail: all exceedances are zero")]
    DegenerateTail,

    #[error("unknown subject '{0}'")]
    UnknownSubject(String),

    #[error("model comparison error: {0}")]
    Comparison(String),

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

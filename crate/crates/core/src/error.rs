use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("negative variance {value} at index {index}")]
    NegativeVariance { index: usize, value: f64 },

    #[error("invalid probability {0}: must lie in [0, 1]")]
    InvalidProbability(f64),

    #[error("gaussian loss requires strictly positive variance, got {0}")]
    SingularVariance(f64),

    #[error("prediction {value} outside (0, 1) at index {index}")]
    InvalidPrediction { index: usize, value: f64 },

    #[error("non-finite value in {what}{}", step.map(|s| format!(" at time step {s}")).unwrap_or_default())]
    NonFinite {
        what: &'static str,
        step: Option<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset {location}: {message}")]
    Dataset { location: String, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("spectral radius of sampled matrix is numerically zero after {0} attempts")]
    DegenerateSpectrum(usize),

    #[error("all {0} runs failed")]
    AllRunsFailed(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

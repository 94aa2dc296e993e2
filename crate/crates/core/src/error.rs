use thiserror::Error;

use crate::trainer::TrainTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("power iteration did not converge after {iterations} steps (last estimate {estimate})")]
    NoConvergence { iterations: usize, estimate: f64 },

    #[error("dataset generation failed after {attempts} attempts")]
    Generation { attempts: usize },

    #[error("index error: {0}")]
    Index(String),

    #[error("exact expectation needs {required} subsets per anchor, above the cap of {cap}; use monte-carlo mode")]
    EnumerationCap { required: u128, cap: u64 },

    #[error("non-finite loss while probing {0}")]
    Evaluation(String),

    #[error("training diverged at t={t}: {detail}")]
    Divergence {
        t: usize,
        detail: String,
        trace: Box<TrainTrace>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("probe error: {0}")]
    Probe(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

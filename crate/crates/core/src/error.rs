use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("LCA diverged at iteration {iter} (energy {energy:.6e} > 10 x initial {initial:.6e}); reduce dt/tau (currently {ratio})")]
    SolverDivergence {
        iter: usize,
        energy: f64,
        initial: f64,
        ratio: f32,
    },

    #[error("batch {batch}: {source}")]
    AtBatch {
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged: non-finite loss at step {step}")]
    TrainingDivergence { step: usize },

    #[error("problem too large for the dense oracle: {vars} activation variables (limit {limit})")]
    TooLarge { vars: usize, limit: usize },

    #[error("parse error at byte {offset}: {msg}")]
    ParseAt { offset: usize, msg: String },

    #[error("parse error on line {line}: {msg}")]
    ParseLine { line: usize, msg: String },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

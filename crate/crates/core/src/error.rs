use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid molecule {molecule}: {message}")]
    Validation { molecule: String, message: String },
    #[error("graph {0} already carries auxiliary edges")]
    AlreadyAugmented(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("integration failed for {molecule} at t = {t}: {message}")]
    Integration { molecule: String, t: f64, message: String },
    #[error("degenerate actnorm scale {0:e}")]
    DegenerateScale(f64),
    #[error("training diverged at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },
    #[error("metric error: {0}")]
    Metric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

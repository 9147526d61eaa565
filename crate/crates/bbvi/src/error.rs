use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("value outside factor support: {0}")]
    OutOfSupport(String),
    #[error("unknown latent id: {0}")]
    UnknownLatent(String),
    #[error("family/model mismatch: {0}")]
    Mismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model validation failed: {0}")]
    Validation(String),
    #[error("run diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        trace: Box<crate::optimize::RunTrace>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

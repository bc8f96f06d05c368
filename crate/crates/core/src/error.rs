use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range (size {size})")]
    Range { index: usize, size: usize },

    #[error("shape mismatch: expected {expected}, got {actual} ({what})")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("elite set is empty; refinement must not run")]
    EmptyElite,

    #[error("no preference pairs could be formed: {0}")]
    NoPairs(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("line {line}: {message}")]
    Persist { line: usize, message: String },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            what,
            expected,
            actual,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

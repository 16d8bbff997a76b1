use thiserror::Error;

/// Errors surfaced by tape construction, model assembly, inference, and IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{op} expects {expected}, got {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: (usize, usize),
    },

    #[error("invalid argument for {what}: {why}")]
    InvalidArgument { what: &'static str, why: String },

    #[error("numerical failure in {what}: {why}")]
    Numerical { what: &'static str, why: String },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        got: (usize, usize),
        expected: (usize, usize),
    },

    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),

    #[error("replay log exhausted or mismatched: {0}")]
    Replay(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

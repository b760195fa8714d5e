use thiserror::Error;

/// Errors produced by the numeric substrate and the layers built on it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error in field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("input value {value} outside [0,1] at index {index}")]
    Range { value: f64, index: usize },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("numeric abort: non-finite value first observed in parameter `{param}`")]
    NumericAbort { param: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("unknown checkpoint format version {found} (supported: {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

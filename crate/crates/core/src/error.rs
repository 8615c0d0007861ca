use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid architecture `{text}`: {reason}")]
    Arch { text: String, reason: String },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("infeasible geometry: {0}")]
    Geometry(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("int8 quantization is not supported for the `{0}` family")]
    QuantUnsupported(String),

    #[error("dataset error at line {line}: {reason}")]
    Data { line: usize, reason: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate entry: {0}")]
    Duplicate(String),
    #[error("invalid {what}: {message}")]
    Validation { what: &'static str, message: String },
    #[error("structural error: {0}")]
    Structure(String),
    #[error("unsupported face with {0} corners (only triangles are supported)")]
    UnsupportedFace(usize),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("degenerate triangle (squared area {0:e})")]
    DegenerateTriangle(f64),
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape { op: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown camera `{0}`")]
    UnknownCamera(String),
    #[error("usage error: {0}")]
    Usage(&'static str),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("training diverged: loss {loss} exceeds {limit}")]
    Diverged { loss: f64, limit: f64 },
    #[error("protocol error: {0}")]
    Protocol(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn validation(what: &'static str, message: impl Into<String>) -> Self {
        Error::Validation { what, message: message.into() }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape { op, expected: expected.to_vec(), got: got.to_vec() }
    }
}

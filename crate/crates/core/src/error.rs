use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {details}")]
    DimMismatch { op: &'static str, details: String },

    #[error("softmax row has empty support (all entries masked)")]
    EmptySoftmaxSupport,

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("residual path requires d_v = d_model (d_v = {d_v}, d_model = {d_model})")]
    ResidualShape { d_v: usize, d_model: usize },

    #[error("diagonal mask needs at least two time steps")]
    MaskSingleStep,

    #[error("sinusoidal positional encoding requires even d_model (got {0})")]
    OddDModel(usize),

    #[error("finite differences require a deterministic regularizer; dropout was given")]
    NonDeterministicRegularizer,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key: {0}")]
    UnknownKey(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, details: impl Into<String>) -> Self {
        Error::DimMismatch {
            op,
            details: details.into(),
        }
    }
}

use thiserror::Error;

/// Errors surfaced by the engine's numeric and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("channel count {0} is odd; half-channel scaling requires an even count")]
    OddChannels(usize),

    #[error("spatial size {0}x{1} is not a power of two")]
    NonPowerOfTwo(usize, usize),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("unknown condition `{0}`")]
    UnknownCondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file `{path}` at byte offset {offset}: {reason}")]
    MalformedFile {
        path: String,
        offset: u64,
        reason: String,
    },

    #[error("numerical abort at iteration {iter}: {reason}")]
    NumericalAbort { iter: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

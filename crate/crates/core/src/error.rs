use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, finiteness).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced non-finite values or failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Joint diagonalisation could not reach the requested tolerance.
    #[error("joint diagonalisation residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    Diagonalization { residual: f64, tolerance: f64 },

    /// Binary file (dataset or checkpoint) could not be decoded.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Configuration text could not be parsed or validated.
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    /// Training aborted after repeated non-finite objectives.
    #[error("training diverged at step {step}: {message}")]
    Divergence { step: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

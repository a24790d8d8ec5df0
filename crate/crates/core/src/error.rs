use thiserror::Error;

#[derive(Debug, Error)]
pub enum SnipsError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("singular value decomposition failed for a {rows}x{cols} operator")]
    Decomposition { rows: usize, cols: usize },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    Dimension {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("chain diverged at level {level}, step {step}")]
    Divergence { level: usize, step: usize },

    #[error("denoiser protocol error: {message} (raw header: {header:02x?})")]
    Protocol { message: String, header: Vec<u8> },

    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SnipsError> = std::result::Result<T, E>;

pub(crate) fn argument(msg: impl Into<String>) -> SnipsError {
    SnipsError::Argument(msg.into())
}

pub(crate) fn check_dim(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected != actual {
        return Err(SnipsError::Dimension {
            expected,
            actual,
            context,
        });
    }
    Ok(())
}

use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum VtpError {
    /// Inconsistent or invalid configuration (grid divisibility, channel counts, ...).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index:?} out of range for resolution {resolution:?}")]
    IndexOutOfRange {
        index: [usize; 3],
        resolution: [usize; 3],
    },

    /// A NaN or infinity showed up where finite numbers are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("operation `{0}` is not differentiable")]
    NotDifferentiable(&'static str),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl VtpError {
    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> u8 {
        match self {
            VtpError::NonFinite(_) => 3,
            VtpError::Io(_) | VtpError::Json(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, VtpError>;

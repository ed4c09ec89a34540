use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Configuration or argument validation failure. The message names the
    /// offending field path (e.g. `loss_weights.lambda1`).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A tensor failed a shape or finiteness contract.
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    /// Shape mismatch between two arguments that must agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A loss component became non-finite during training.
    #[error("numeric abort: non-finite {component} at epoch {epoch}, step {step}")]
    NumericAbort {
        component: String,
        epoch: usize,
        step: usize,
    },

    /// Dataset construction or ingestion failure.
    #[error("data error: {0}")]
    Data(String),

    /// Unknown registry key, tap id or checkpoint entry.
    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 validation, 2 numeric abort, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericAbort { .. } => 2,
            Error::Io(_) | Error::Image(_) => 3,
            _ => 1,
        }
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operation received incompatible shapes. Names the op and the shapes involved.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration or parameter range.
    #[error("config error: {0}")]
    Config(String),

    /// A contract precondition was violated.
    #[error("{0}")]
    Contract(String),

    /// A non-finite value appeared where finite numerics are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Checkpoint file is malformed or truncated.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged (non-finite loss) at the given step.
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

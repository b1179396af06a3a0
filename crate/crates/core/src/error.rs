use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time {t} is outside {domain}")]
    Domain { t: f64, domain: &'static str },

    #[error("time {t} is within {eps} of the t = 1 singularity")]
    Singularity { t: f64, eps: f64 },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Training { epoch: usize, loss: f64 },

    #[error("non-finite state for particle {particle} at step {step}")]
    Integration { particle: usize, step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(FlowError::DimensionMismatch { expected, got })
    }
}

use thiserror::Error;

/// Errors raised by the observer synthesis pipeline.
#[derive(Debug, Error)]
pub enum KklError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A trajectory left the admissible region or produced non-finite values.
    #[error("trajectory blew up at step {step} (t = {time:.6}, stage {stage}, |x| = {norm:e}){hint}")]
    BlowUp {
        step: usize,
        time: f64,
        /// RK4 stage (1-4) that produced the offending state; 0 for the norm check.
        stage: u8,
        norm: f64,
        hint: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("filter design error: {0}")]
    Design(String),

    /// Loss became NaN or infinite during training.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// Filter state became non-finite while running the observer online.
    #[error("non-finite filter state at step {step}")]
    NonFiniteState { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = KklError> = std::result::Result<T, E>;

use thiserror::Error;

/// Errors surfaced by the simulator library.
///
/// `Validation` covers bad configs, malformed traces and contract violations
/// on operation preconditions; callers map it to exit code 2. `Capacity` is
/// the typed rejection for provisioning past the GPU cap so autoscalers can
/// degrade gracefully instead of aborting a run.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("validation: {0}")]
    Validation(String),

    #[error("capacity exhausted: {0}")]
    CapacityExhausted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl SimError {
    pub fn validation(msg: impl Into<String>) -> Self {
        SimError::Validation(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, SimError>;

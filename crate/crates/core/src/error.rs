use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {field}: expected length {expected}, found {found}")]
    Dimension {
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("value iteration did not converge after {sweeps} sweeps (residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    /// The closed-form threshold expressions divide by `D_p^a`, which must be negative.
    #[error("propagation-cost delta D_p^{action} = {value} is not negative")]
    NonNegativeCostDelta { action: usize, value: f64 },

    #[error("threshold for action {action} is {value}, which never triggers a switch")]
    ThresholdOutOfRange { action: usize, value: f64 },

    #[error("oracle policy needs the hidden change-point and horizon")]
    MissingHiddenInfo,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

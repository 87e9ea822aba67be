use thiserror::Error;

/// Errors raised by the policy, reward, estimator and oracle layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    /// An argument violates the domain of an operation (terminal state,
    /// out-of-vocabulary token, inconsistent trajectory, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value is invalid. `field` names the offending key.
    #[error("invalid config `{field}`: {message}")]
    Config { field: String, message: String },

    /// An enumeration would exceed the configured budget.
    #[error("enumeration budget exceeded: {required} trajectories needed, budget is {budget}")]
    Budget { required: u128, budget: usize },

    /// The task has (numerically) zero reward spread, so quantities that
    /// divide by the mean group standard deviation are undefined.
    #[error("degenerate task: {0}")]
    Degenerate(String),
}

impl LabError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn domain(message: impl Into<String>) -> Self {
        LabError::Domain(message.into())
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The requested allocation cannot satisfy the per-target floors.
    #[error("infeasible allocation: floors need {required:.6} but the budget is {budget:.6} (deficit {deficit:.6})")]
    Infeasible {
        required: f64,
        budget: f64,
        deficit: f64,
    },

    /// A matrix that must be inverted is singular or not positive definite.
    #[error("numerical failure in {context}: matrix is singular (condition estimate {condition:.3e})")]
    Singular { context: &'static str, condition: f64 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

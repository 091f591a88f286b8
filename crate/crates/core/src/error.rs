use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A penalized normal-equation system could not be factorized.
    #[error("singular system in {context} (penalty parameter {penalty:e})")]
    SingularSystem { context: String, penalty: f64 },

    /// The plug-in variance block of dataset `k` is not invertible even after jitter.
    #[error("conditional variance block of dataset {k} is singular")]
    SingularVariance { k: usize },

    #[error("group lasso did not converge after {iterations} iterations (KKT residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn singular(context: impl Into<String>, penalty: f64) -> Self {
        Error::SingularSystem {
            context: context.into(),
            penalty,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        !matches!(self, Error::InvalidArgument(_))
    }
}

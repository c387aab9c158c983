use thiserror::Error;

/// Errors produced by the filtering and linear-algebra layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A matrix that must be symmetric positive definite is not
    /// (Cholesky hit a non-positive pivot).
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    /// The Jacobi eigensolver did not reach its tolerance within the
    /// sweep cap.
    #[error("eigensolver did not converge within {0} sweeps")]
    NoConvergence(usize),

    /// A state or intermediate value became non-finite, typically from
    /// an unstable time step.
    #[error("numerical overflow: {0}")]
    Overflow(String),

    /// A configuration document failed to parse or validate.
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

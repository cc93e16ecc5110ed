use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid direction {mu} for dimension {d}")]
    InvalidDirection { mu: i32, d: usize },

    #[error("unsupported dimension {d}: {reason}")]
    UnsupportedDimension { d: usize, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("site {0:?} outside the domain")]
    Domain(Vec<i64>),

    #[error("kernel table does not cover {0:?}")]
    Coverage(Vec<i64>),

    #[error("quadrature did not converge (achieved error {achieved:.3e}, requested {requested:.3e})")]
    ConvergenceFailure { achieved: f64, requested: f64 },

    #[error("derivative order {0} not supported (max 4)")]
    UnsupportedOrder(usize),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("construction failed at scale {scale}: {reason}")]
    ConstructionFailure { scale: usize, reason: String },

    #[error("enumeration budget exceeded after {partial} items")]
    BudgetExceeded { partial: u64 },

    #[error("covariance is not positive semidefinite: {0}")]
    InvalidCovariance(String),

    #[error("unreliable estimate: {0}")]
    UnreliableEstimate(String),

    #[error("symmetry violation: {0}")]
    SymmetryViolation(String),

    #[error("flow diverged at scale {scale}: {reason}")]
    Divergence { scale: usize, reason: String },

    #[error("no sign change found in bracket [{lo}, {hi}]")]
    BracketFailure { lo: f64, hi: f64 },

    #[error("infeasible: {0}")]
    Infeasible(String),
}

impl Error {
    /// Validation problems are the caller's fault; everything else is a
    /// numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidDirection { .. }
                | Error::UnsupportedDimension { .. }
                | Error::Invalid(_)
                | Error::Domain(_)
                | Error::UnsupportedOrder(_)
        )
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}

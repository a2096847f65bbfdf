use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A standing assumption failed (coercivity, positivity, Lipschitz, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("implicit operator I + dt*A is singular at node {node}")]
    SingularOperator { node: usize },

    #[error("non-finite state at step {step} (particle {particle})")]
    BlowUp { step: usize, particle: usize },

    #[error("regression design matrix is rank deficient at node {node}")]
    RankDeficient { node: usize },

    #[error("Picard iteration did not converge after {} sweeps (last residual {:.3e})", .residuals.len(), .residuals.last().copied().unwrap_or(f64::NAN))]
    PicardNonConvergence { residuals: Vec<f64> },

    #[error("fixed-point iteration did not converge after {} iterations (last change {:.3e}); try a smaller damping", .history.len(), .history.last().copied().unwrap_or(f64::NAN))]
    FixedPointNonConvergence { history: Vec<f64> },

    #[error("non-finite cost: {0}")]
    NonFiniteCost(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors that signal a violated assumption or malformed input,
    /// as opposed to solver failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. } | Error::InvalidInput(_) | Error::Validation(_)
        )
    }

    pub fn is_non_convergence(&self) -> bool {
        matches!(
            self,
            Error::PicardNonConvergence { .. } | Error::FixedPointNonConvergence { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Csv(_))
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}

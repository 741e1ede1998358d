use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("ill-conditioned matrix in {context}: condition number {condition:e} exceeds 1e12")]
    IllConditioned {
        context: &'static str,
        condition: f64,
    },
    #[error("non-finite gradient in layer `{layer}`")]
    NonFiniteGradient { layer: String },
    #[error("non-finite {what} during {stage} at step {step}")]
    NonFinite {
        what: &'static str,
        stage: &'static str,
        step: u64,
    },
    #[error("non-finite Langevin iterate at inner step {step}")]
    NonFiniteIterate { step: usize },
    #[error("chain failed at position {position} (sigma = {sigma}): {source}")]
    Chain {
        position: usize,
        sigma: f64,
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    /// A primitive produced NaN or infinity.
    #[error("numeric fault: `{op}` produced a non-finite value")]
    NumericFault { op: &'static str },
    #[error("non-finite gradient reached node {node}")]
    NonFiniteGradient { node: usize },
    #[error("backward already ran on this tape; record a new one")]
    TapeConsumed,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("finite-difference step {0} outside [1e-6, 1e-2]")]
    InvalidStep(f64),
}

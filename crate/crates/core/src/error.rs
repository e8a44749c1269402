use thiserror::Error;

/// Errors raised by the numerical layers and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("resolvent singular at E = {energy}: smallest singular value {sigma_min:e}")]
    Singular { energy: f64, sigma_min: f64 },

    #[error("smallness condition failed for {what}: product {product} > 1/2")]
    Smallness { what: String, product: f64 },

    #[error("Neumann series diverged after {0} terms")]
    NeumannDivergence(usize),

    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("reconstruction mismatch in {what}: relative residual {residual:e}")]
    Reconstruction { what: String, residual: f64 },

    #[error("unsupported disorder model: {0}")]
    UnsupportedModel(String),

    #[error("eigensolver failure: {0}")]
    Eigensolver(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

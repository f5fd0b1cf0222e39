use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has (numerically) zero norm")]
    ZeroVector,

    #[error("subgradient block has norm {norm} > 1")]
    InvalidSubgradient { norm: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("reference block {block} is zero on the support")]
    ZeroReference { block: usize },

    #[error("block {block} is not in the support")]
    NotInSupport { block: usize },

    #[error("oracle did not reach tolerance {tol:e} (residual {residual:e})")]
    BudgetExceeded { tol: f64, residual: f64 },

    #[error("step sizes violate tau*sigma*|G^T G| < 1 (product is {product})")]
    StepSizeViolation { product: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

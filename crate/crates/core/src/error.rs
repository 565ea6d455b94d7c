use thiserror::Error;

/// Errors shared across the crate.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is singular or numerically rank-deficient (pivot {pivot} underflowed)")]
    SingularMatrix { pivot: usize },

    #[error("singular patch subsystem at query {query:?} (pivot {pivot})")]
    SingularPatch { query: Vec<f64>, pivot: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("basis index {index} out of range (family has {count} bases)")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("derivative order {requested} not supported (max {max})")]
    UnsupportedOrder { requested: u8, max: u8 },

    #[error("operator needs derivative order {needed} but bundle only carries order {got}")]
    OrderTooLow { needed: u8, got: u8 },

    #[error("parse error at byte {offset}: expected {expected}, found {found}")]
    ParseError {
        offset: usize,
        expected: String,
        found: String,
    },

    #[error("field weights are stale; re-solve before evaluating")]
    StaleWeights,

    #[error("bad configuration: {0}")]
    BadConfig(String),

    #[error("bad target value: {0}")]
    BadTarget(String),

    #[error("parameter/gradient shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("constraint residual {residual:e} exceeded the solver bound {bound:e}")]
    ResidualViolation { residual: f64, bound: f64 },

    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

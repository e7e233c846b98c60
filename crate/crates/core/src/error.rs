use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("column {0} has zero norm")]
    ZeroNorm(usize),

    #[error("{0}: zero variance")]
    ZeroVariance(&'static str),

    #[error("matrix is not symmetric at ({row}, {col}): |a_ij - a_ji| = {diff:e}")]
    NotSymmetric { row: usize, col: usize, diff: f64 },

    #[error("degenerate structure: {0}")]
    Degenerate(String),

    #[error("value {value} is outside {set}")]
    Domain { value: i64, set: String },

    #[error("token {0} is not in the vocabulary")]
    UnknownToken(u32),

    #[error("token {0} has no occurrences for this statistic")]
    NoSupport(u32),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (epoch {epoch})")]
    NonFinite { step: u64, epoch: usize },

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

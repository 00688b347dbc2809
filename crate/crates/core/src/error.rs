use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, lengths or parameter layouts disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A forward value became NaN or infinite.
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    /// An operation was called out of order (e.g. backward before forward).
    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// The scalarized objective has no finite minimizer for this coefficient.
    #[error("unbounded problem: {0}")]
    Unbounded(String),

    /// An unlearning or fine-tuning run produced a non-finite value.
    /// `last_params` holds the last finite parameters.
    #[error("run diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        last_params: Vec<f64>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced (or was fed) NaN or infinity.
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    /// An all-zero signal cannot be scaled to unit power.
    #[error("degenerate signal: zero power cannot be normalized")]
    DegenerateSignal,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

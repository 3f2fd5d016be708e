use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] ulbsc_autodiff::Error),

    /// A configuration or input value is outside its allowed range.
    #[error("invalid {what}: {detail}")]
    Validation { what: &'static str, detail: String },

    /// Malformed bytes in a file or wire payload.
    #[error("format error: {0}")]
    Format(String),

    #[error("caption has {words} words, at most {max} fit")]
    Length { words: usize, max: usize },

    #[error("index {index} out of range for a codebook of {n_idx}")]
    Lookup { index: usize, n_idx: usize },

    #[error("payload does not match mode {mode}: {detail}")]
    Payload { mode: &'static str, detail: String },

    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    /// Wraps a component failure with the pipeline stage it came from.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Validation {
            what,
            detail: detail.into(),
        }
    }
}

/// Attaches a stage label to errors.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e.into()),
        })
    }
}

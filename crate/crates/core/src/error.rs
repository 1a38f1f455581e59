use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("attention over an empty key set")]
    EmptyKeys,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("token id {id} is outside the vocabulary of size {size}")]
    Vocabulary { id: u32, size: usize },

    #[error("condition `{0}` has no non-pad tokens")]
    EmptyCondition(String),

    #[error("grammar error at token `{token}`: {detail}")]
    Grammar { token: String, detail: String },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("model is frozen; its parameters cannot be updated")]
    FrozenViolation,

    #[error("integrity error in section `{section}`: {detail}")]
    Integrity { section: String, detail: String },

    #[error("training diverged at step {step} (last stable step {last_stable})")]
    Divergence { step: usize, last_stable: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn integrity(section: &str, detail: impl Into<String>) -> Self {
        Error::Integrity {
            section: section.to_string(),
            detail: detail.into(),
        }
    }
}

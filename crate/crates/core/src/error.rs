use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty query: every text token is masked")]
    EmptyQuery,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error for qid {qid}, field `{field}`: {message}")]
    Validation {
        qid: i64,
        field: &'static str,
        message: String,
    },

    #[error("loss composition error: component `{0}` is not finite")]
    Composition(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("feature file error: {0}")]
    Feature(String),

    #[error("optimizer step aborted: {0}")]
    Optimizer(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

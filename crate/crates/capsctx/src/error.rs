use thiserror::Error;

#[derive(Debug, Error)]
pub enum CapsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training aborted: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, CapsError>;

use cvsim_core::CoreError;
use invaert_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum InvaertError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("model bundle: {0}")]
    Bundle(String),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, InvaertError>;

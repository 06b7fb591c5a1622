use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid batch-norm statistics at {0}")]
    InvalidBn(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("invalid structure: {0}")]
    InvalidStructure(String),
    #[error("degenerate box {0}")]
    DegenerateBox(String),
    #[error("non-finite loss component {0}")]
    NonFinite(String),
    #[error("{path}: parse error at byte {position}: {message}")]
    Parse {
        path: PathBuf,
        position: u64,
        message: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

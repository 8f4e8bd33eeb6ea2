use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MasfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MasfError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("cannot partition {channels} channels into {parts} equal parts")]
    Partition { channels: usize, parts: usize },

    #[error("{file}:{line}: malformed annotation `{text}`: {reason}")]
    Parse {
        file: String,
        line: usize,
        text: String,
        reason: String,
    },

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no evaluable classes: ground truth is empty")]
    NoEvaluableClasses,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl MasfError {
    /// Process exit code used by the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            MasfError::Config(_)
            | MasfError::Shape(_)
            | MasfError::Dimension(_)
            | MasfError::Partition { .. }
            | MasfError::Json(_) => 2,
            MasfError::Parse { .. }
            | MasfError::MissingFile(_)
            | MasfError::Data(_)
            | MasfError::NoEvaluableClasses
            | MasfError::Io(_)
            | MasfError::Image(_) => 3,
            MasfError::Numerical(_) => 4,
        }
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> MasfError {
    MasfError::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> MasfError {
    MasfError::Shape(msg.into())
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("corrupt data: {0}")]
    Corruption(String),
    #[error("invalid label code {code} at voxel {index}")]
    InvalidLabel { code: i32, index: usize },
    #[error("size error: {0}")]
    Size(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite loss at step {step} (lr {lr:e}, seg {seg_loss}, rec {rec_loss})")]
    Diverged {
        step: usize,
        lr: f64,
        seg_loss: f64,
        rec_loss: f64,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into().display().to_string(),
            source,
        }
    }

    /// Prefixes the error with a case identifier where the variant carries context.
    pub fn in_case(self, case_id: &str) -> Self {
        match self {
            Error::Io { context, source } => Error::Io {
                context: format!("case {case_id}: {context}"),
                source,
            },
            Error::Data(m) => Error::Data(format!("case {case_id}: {m}")),
            Error::Format(m) => Error::Format(format!("case {case_id}: {m}")),
            Error::Corruption(m) => Error::Corruption(format!("case {case_id}: {m}")),
            Error::Shape(m) => Error::Shape(format!("case {case_id}: {m}")),
            other => other,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss node {0} does not depend on any leaf that requires a gradient")]
    DetachedGraph(usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("could not place {requested} objects after {attempts} attempts; try fewer or smaller objects")]
    Placement { requested: usize, attempts: usize },

    #[error("class {class} is absent from the {subset} subset")]
    ClassAbsent { class: u32, subset: &'static str },

    #[error("class {class} has {available} labels, need {needed}")]
    InsufficientLabels {
        class: u32,
        available: usize,
        needed: usize,
    },

    #[error("no exact {k}-shot selection exists for class {class}")]
    NoExactFit { class: u32, k: usize },

    #[error("missing class {0}")]
    MissingClass(u32),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dataset format: {0}")]
    Format(String),

    #[error("io error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },

    #[error("cannot reduce over empty axis {axis} of shape {shape:?}")]
    EmptyAxis { axis: usize, shape: Vec<usize> },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss must be a single element, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tensor does not belong to this tape")]
    ForeignTensor,

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("not enough data: {0}")]
    Insufficient(String),

    #[error("training diverged: non-finite loss for task seed {task_seed} at batch {batch}")]
    Diverged { batch: u64, task_seed: u64 },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv parse error at line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{what} index {index} out of range (size {size})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("unknown initialization scheme `{0}`")]
    UnknownScheme(String),

    #[error("node {0} is not on the tape")]
    NotOnTape(usize),

    #[error("loss node must be a scalar, found length {0}")]
    NonScalarLoss(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown market code `{0}`")]
    UnknownMarket(String),

    #[error("user {0} belongs to more than one market")]
    OverlappingUsers(u32),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("reports are not aligned: {0}")]
    Misaligned(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::Shape {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

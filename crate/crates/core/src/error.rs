use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("empty batch: candidate count must be at least 1")]
    EmptyBatch,

    #[error("no field pairs: need at least two fields, got {fields}")]
    NoPairs { fields: usize },

    #[error("no fields to attend over")]
    NoFields,

    #[error("{what} {index} out of range 0..={max}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        max: usize,
    },

    #[error("empty layer list")]
    EmptyStack,

    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("worker {worker} failed during closed-loop run ({context}): {message}")]
    Worker {
        worker: usize,
        context: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::DimensionMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

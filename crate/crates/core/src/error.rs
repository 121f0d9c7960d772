use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: operand is empty")]
    EmptyTensor { op: &'static str },

    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this record; run a fresh forward pass")]
    RecordConsumed,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("iterate {iteration} is non-finite at t[{index}] = {time}")]
    NonFiniteIterate {
        iteration: usize,
        index: usize,
        time: f64,
    },

    #[error("query {query} outside grid range [{lo}, {hi}]")]
    OutOfRange { query: f64, lo: f64, hi: f64 },

    #[error("integration bounds reversed: lower {lower} > upper {upper}")]
    ReversedBounds { lower: f64, upper: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("observations have zero variance")]
    ZeroVariance,

    #[error("no attention weights recorded; run a forward pass first")]
    NoForwardPass,

    #[error("{path}: row {row}, column {col}: cannot parse {cell:?} as a number")]
    BadCell {
        path: PathBuf,
        row: usize,
        col: usize,
        cell: String,
    },

    #[error("dataset shape mismatch: {0}")]
    DatasetShape(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for failures caused by the numbers themselves (non-finite
    /// iterates, gradients, samples) rather than by bad inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::NonFiniteIterate { .. } => true,
            Error::Training { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

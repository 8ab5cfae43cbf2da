use std::path::PathBuf;

/// Errors produced anywhere in the clustering pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op} at node {node}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("node {0} is not on this tape")]
    UnknownNode(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("contradictory side information: cannot-link inside a must-link component {0:?}")]
    Contradiction(Vec<(usize, usize)>),

    #[error("side information has no dissimilar pseudo-class to draw negatives from")]
    NoNegatives,

    #[error("sinkhorn normalization hit a zero {axis} sum at index {index}")]
    ZeroSum { axis: &'static str, index: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("failed to place {k} centers at separation {separation} after {attempts} attempts")]
    Placement {
        k: usize,
        separation: f64,
        attempts: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

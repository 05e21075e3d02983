use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index {index} out of range for {what} (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("mask composition error: {0}")]
    Composition(String),

    #[error("capacity exceeded: sequence length {len} > L_max {max}")]
    Capacity { len: usize, max: usize },

    #[error("{modality} graph has {nodes} nodes but its span holds {tokens} tokens")]
    Alignment {
        modality: &'static str,
        nodes: usize,
        tokens: usize,
    },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("table shape error: row {row} has {got} cells, expected {expected}")]
    Shape {
        row: usize,
        got: usize,
        expected: usize,
    },

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    Determinism { first: f64, second: f64 },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Validation errors are caused by bad input or configuration; everything
    /// else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::Divergence { .. } | Error::Numeric(_) | Error::Determinism { .. }
        )
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

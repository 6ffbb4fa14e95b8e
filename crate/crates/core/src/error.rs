use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("{0}: no unmasked positions")]
    EmptyMask(&'static str),
    #[error("attention query row {0} has no attendable key")]
    FullyMaskedRow(usize),
    #[error("empty context bank")]
    EmptyContext,
    #[error("episode needs {len} positions but max_positions is {max}")]
    EpisodeTooLong { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Protocol(String),
    #[error("non-finite loss {loss} at step {step} (mode {mode}, seed {seed})")]
    NonFiniteLoss {
        loss: f64,
        step: u64,
        mode: String,
        seed: u64,
    },
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(PathBuf),
    #[error(transparent)]
    Checkpoint(#[from] crate::trainer::checkpoint::CheckpointError),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },

    #[error("batchnorm: degenerate batch, {count} values per channel (need at least 2)")]
    DegenerateBatch { count: usize },

    #[error("non-finite activation in block {block} at iteration {iteration}")]
    NumericOverflow { block: usize, iteration: usize },

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown config key `{key}` (line {line})")]
    UnknownKey { key: String, line: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint: tensor `{name}` has shape {got:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

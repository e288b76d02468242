use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum GitoError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed data at byte {offset}: {msg}")]
    Malformed { offset: u64, msg: String },

    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),

    #[error("zero-norm truth in channel {0}")]
    ZeroNormChannel(usize),

    #[error("non-finite loss at epoch {epoch} step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl GitoError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        GitoError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short stable identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            GitoError::Shape { .. } => "shape",
            GitoError::InvalidArgument(_) => "invalid_argument",
            GitoError::Config(_) => "config",
            GitoError::Malformed { .. } => "malformed",
            GitoError::ChannelMismatch(_) => "channel_mismatch",
            GitoError::ZeroNormChannel(_) => "zero_norm_channel",
            GitoError::NonFiniteLoss { .. } => "non_finite_loss",
            GitoError::Io(_) => "io",
        }
    }
}

pub type Result<T, E = GitoError> = std::result::Result<T, E>;

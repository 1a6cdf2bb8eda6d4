use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("experience bank is empty")]
    EmptyBank,

    #[error("no retrievable candidate (every candidate step is terminal)")]
    NoCandidate,

    #[error("rollout {rollout_id} step {step_index} has no successor")]
    NoSuccessor { rollout_id: u32, step_index: usize },

    #[error("unknown rollout {0}")]
    UnknownRollout(u32),

    #[error("rollout {0} already present in bank")]
    DuplicateRollout(u32),

    #[error("episode already finished; call reset first")]
    EpisodeFinished,

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input at byte offset {offset}")]
    Truncated { offset: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

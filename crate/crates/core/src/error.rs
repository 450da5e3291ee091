use thiserror::Error;

use crate::trace::DecodeTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("vocabulary needs at least 2 tokens, got {0}")]
    VocabTooSmall(u32),
    #[error("mask id {mask_id} collides with real token range [0, {size})")]
    MaskCollides { mask_id: u32, size: u32 },
    #[error("generation window must be non-empty")]
    EmptyGeneration,
    #[error("block length {block_len} does not divide generation length {gen_len}")]
    BlockMismatch { gen_len: usize, block_len: usize },
    #[error("prompt token {0} is not a real vocabulary id")]
    BadPromptToken(u32),
    #[error("duplicate position {0} in oracle layout")]
    DuplicatePosition(usize),
    #[error("{0}")]
    Invalid(String),
}

impl ConfigError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ConfigError::Invalid(msg.into())
    }
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("position {0} is not masked in the query state")]
    NotMasked(usize),
    #[error("position {0} is outside the generation window")]
    OutOfWindow(usize),
    #[error("conditioning evidence has zero probability")]
    ImpossibleEvidence,
    #[error("oracle does not provide exact joint probabilities")]
    Unsupported,
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch of {got} exceeds limit {limit}")]
    BatchTooLarge { got: usize, limit: usize },
    #[error("sequence still has masked positions")]
    Incomplete,
    #[error("query does not match oracle shape: {0}")]
    Shape(String),
    #[error("malformed oracle response: {0}")]
    Protocol(String),
    #[error("transport failure (retryable): {0}")]
    Transport(String),
}

impl OracleError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, OracleError::Transport(_))
    }
}

/// A scheduler run failed; the trace recorded so far is attached.
#[derive(Debug, Error)]
#[error("decoding failed after {} rounds: {source}", partial.rounds.len())]
pub struct DecodeError {
    #[source]
    pub source: OracleError,
    pub partial: Box<DecodeTrace>,
}

#[derive(Debug, Error)]
pub enum InfoError {
    #[error("zero confidence recorded at position {position} in round {round}")]
    ZeroConfidence { round: usize, position: usize },
    #[error("bound is inapplicable for f = {0} (requires 0 < f <= 1)")]
    InapplicableFactor(f64),
    #[error("n must be at least 1")]
    EmptySequence,
    #[error("trace is incomplete")]
    IncompleteTrace,
    #[error("no traces supplied")]
    NoTraces,
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

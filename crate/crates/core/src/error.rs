use alloc::string::String;

/// Errors surfaced by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("slide smaller than region: extent {width}x{height}, region side {side}")]
    SlideTooSmall { width: usize, height: usize, side: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("zero-norm embedding at index {index} ({which})")]
    ZeroNorm { which: &'static str, index: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite loss at step {step}: {term}")]
    NonFiniteLoss { step: u64, term: &'static str },
    #[error("sequence of length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("unknown ablation flag {0:?}")]
    UnknownAblation(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("alpha must be >= 1, got {0}")]
    AlphaDomain(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token {token} out of vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("sequence of length {0} is too short")]
    SequenceTooShort(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("hard mode is inference-only; gradients require soft mode")]
    UnsupportedMode,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("kv cache: {0}")]
    Cache(String),
    #[error("invalid sampling parameters: {0}")]
    Sampling(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

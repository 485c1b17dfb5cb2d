use thiserror::Error;

/// Errors surfaced by model construction, inference, data handling and training.
///
/// Programming errors (shape mismatches between tape tensors, invalid op
/// arguments) panic instead; see the `diff` module docs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence length {0} is not a power of two (>= 2)")]
    NotPowerOfTwo(usize),
    #[error("{0} is not a valid permutation of 0..{1}")]
    BadPermutation(String, usize),
    #[error("token {token} out of range for vocabulary size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("step index {t} out of range 0..={n}")]
    StepOutOfRange { t: usize, n: usize },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("scope mismatch: {0}")]
    ScopeMismatch(String),
    #[error("enumeration guard tripped: {what} would need {size} entries (limit {limit})")]
    BlowupGuard {
        what: &'static str,
        size: u128,
        limit: u128,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown model family {0:?}")]
    UnknownFamily(String),
    #[error("model document malformed: {0}")]
    BadDocument(String),
    #[error("dataset cache malformed: {0}")]
    BadCache(String),
    #[error("vocabulary overflow: text contains {found} distinct symbols, limit {limit}")]
    VocabOverflow { found: usize, limit: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

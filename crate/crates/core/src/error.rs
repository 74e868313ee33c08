use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("timestep {t} out of range [{min}, {max}]")]
    Timestep { t: usize, min: usize, max: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("token index {index} out of range for vocabulary of size {vocab}")]
    Token { index: usize, vocab: usize },

    #[error("embedding row {row} has zero norm; cosine similarity is undefined")]
    ZeroNorm { row: usize },

    #[error("rescaling factor search exceeded cap F = {cap} (last DGS = {last_dgs:.4})")]
    SearchDiverged { cap: f64, last_dgs: f64 },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("checkpoint section `{section}`: {reason}")]
    Checkpoint { section: String, reason: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Self {
        Error::Shape { expected: expected.to_string(), actual: actual.to_string() }
    }
}

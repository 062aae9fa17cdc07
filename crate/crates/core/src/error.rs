use std::path::PathBuf;

/// Errors produced by the training library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty sentence")]
    EmptySentence,
    #[error("line count mismatch: {src} source lines vs {tgt} target lines")]
    LineCountMismatch { src: usize, tgt: usize },
    #[error("pair {index} needs {tokens} tokens but the batch budget is {budget}")]
    OversizedPair { index: usize, tokens: usize, budget: usize },
    #[error("empty reference")]
    EmptyReference,
    #[error("list length mismatch: {hyps} hypotheses vs {refs} references")]
    ListMismatch { hyps: usize, refs: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    InvalidToken { id: u32, size: usize },
    #[error("expected {expected} step weights, got {got}")]
    WeightMismatch { expected: usize, got: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("training diverged: non-finite {0}")]
    DivergedTraining(&'static str),
    #[error("reinforcement learning requires an initial model")]
    MissingInitModel,
    #[error("datasets use different vocabularies")]
    VocabMismatch,
    #[error("output space of {size} sequences exceeds the enumeration budget of {budget}")]
    SpaceTooLarge { size: f64, budget: usize },
    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("invalid model config: {0}")]
    InvalidModelConfig(String),
    #[error("{path}: {source}")]
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

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

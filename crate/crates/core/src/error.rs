use std::path::PathBuf;

/// Error type shared by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown label {label:?} for source {origin} (not in the configured priority map)")]
    UnknownLabel { label: String, origin: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite input to {0}")]
    NonFinite(String),

    #[error("training aborted at epoch {epoch}: non-finite {term} term")]
    TrainingAbort { epoch: usize, term: String },

    #[error("backbone is not frozen; call freeze() before using it as a feature extractor")]
    UnfrozenBackbone,

    #[error("unfreeze_final_stage called on a backbone that was never frozen")]
    NeverFrozen,

    #[error("checkpoint does not match the configured backbone: {0}")]
    CheckpointMismatch(String),

    #[error("stage-2 parity violation: {0}")]
    Parity(String),

    #[error("malformed log line {line} in {path}: {reason}")]
    MalformedLog {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("epoch coverage: {0}")]
    EpochCoverage(String),

    #[error("percent change undefined: initial value is zero")]
    ZeroInitial,

    #[error("manifest error in {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

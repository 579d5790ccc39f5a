use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Every loudness block fell below the absolute or relative gate.
    #[error("signal is below the loudness gate")]
    BelowGate,

    #[error("cannot scale a silent signal to a loudness target")]
    CannotScale,

    #[error("reverberation time is unachievable: absorption {alpha:.4} exceeds 1")]
    UnachievableReverb { alpha: f64 },

    #[error("degenerate room geometry: {0}")]
    DegenerateGeometry(String),

    #[error("SI-SNR target is all zeros")]
    InvalidTarget,

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    #[error("all durations are zero; nothing to expand")]
    EmptyExpansion,

    #[error("frame count mismatch: expected {expected}, got {actual}")]
    FrameMismatch { expected: usize, actual: usize },

    #[error("no records qualify: {0}")]
    EmptySet(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("artifact version mismatch in {path}: expected {expected}, found {found}")]
    ArtifactVersion {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("artifact incompatible: {0}")]
    Incompatible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error in {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

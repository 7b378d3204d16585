use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("signal of {len} samples is shorter than one {window}-sample window")]
    SignalTooShort { len: usize, window: usize },

    #[error("unsupported WAV encoding: {0}")]
    UnsupportedWav(String),

    #[error("WAV error in {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("invalid array geometry: {0}")]
    Geometry(String),

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("degenerate mask at frequency {f}: normalizer {sum:e}")]
    DegenerateMask { f: usize, sum: f64 },

    #[error("solver failure at frequency {f}: {reason} (condition estimate {condition:e})")]
    Solver { f: usize, reason: String, condition: f64 },

    #[error("normalization mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("zero-energy reference signal")]
    ZeroReference,

    #[error("feature layout mismatch: {0}")]
    Layout(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("missing scene {id}: {detail}")]
    MissingScene { id: String, detail: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error(transparent)]
    Nn(#[from] rnnbf_nn::NnError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

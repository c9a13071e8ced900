//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value in {stage} (layer {layer})")]
    Numeric { stage: String, layer: usize },

    #[error("label {label} out of range for {k} classes")]
    LabelRange { label: usize, k: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("alignment error: {utterance}: {features} frames vs {labels} labels")]
    Alignment {
        utterance: String,
        features: usize,
        labels: usize,
    },

    #[error("plan error: {0}")]
    Plan(String),

    #[error("infeasible CTC alignment: {frames} frames cannot emit target of length {target} ({required} required)")]
    Infeasible {
        frames: usize,
        target: usize,
        required: usize,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("split leakage: {0}")]
    Leakage(String),

    #[error("missing upstream artifact from stage `{stage}`: {path}")]
    Dependency { stage: String, path: PathBuf },

    #[error("stale cache at {path}: config hash {found} does not match {expected} (rerun with --force)")]
    StaleCache {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

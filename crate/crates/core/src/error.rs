use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid scene bounds: {0}")]
    InvalidBounds(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("pose format error in {path}: {reason}")]
    PoseFormat { path: PathBuf, reason: String },

    #[error("empty test set: {0}")]
    EmptyTest(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid margin: gamma = {0} is negative")]
    InvalidMargin(f64),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("state error: {0}")]
    State(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("non-finite loss at step {step} (batch {batch:?}): {breakdown}")]
    NonFinite {
        step: usize,
        batch: Vec<(usize, u32)>,
        breakdown: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Stable snake_case identifier for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidPose(_) => "invalid_pose",
            Error::InvalidBounds(_) => "invalid_bounds",
            Error::Range(_) => "range",
            Error::InvalidParams(_) => "invalid_params",
            Error::Io { .. } => "io",
            Error::Load { .. } => "load",
            Error::PoseFormat { .. } => "pose_format",
            Error::EmptyTest(_) => "empty_test",
            Error::InvalidSplit(_) => "invalid_split",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::InvalidMargin(_) => "invalid_margin",
            Error::Shape(_) => "shape",
            Error::Metric(_) => "metric",
            Error::State(_) => "state",
            Error::Format(_) => "format",
            Error::Checksum(_) => "checksum",
            Error::NonFinite { .. } => "non_finite",
            Error::Unsupported(_) => "unsupported",
        }
    }

    /// True for errors caused by bad data or configuration rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Range(_) | Error::InvalidParams(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load utterance `{utterance}`: {reason}")]
    Load { utterance: String, reason: String },

    #[error("alignment mismatch for `{utterance}`: {aligned} aligned words, {transcript} transcript words")]
    AlignmentMismatch {
        utterance: String,
        aligned: usize,
        transcript: usize,
    },

    #[error("invalid interval [{start}, {end})")]
    InvalidInterval { start: f64, end: f64 },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("feature error: {0}")]
    Feature(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("no overlapping utterances between annotators")]
    NoOverlap,

    #[error("span [{start}, {end}) outside [0, {frames})")]
    Span { start: usize, end: usize, frames: usize },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("non-finite loss at step {step} (batch: {})", batch.join(", "))]
    NonFiniteLoss { step: u64, batch: Vec<String> },

    #[error("training error: {0}")]
    Training(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("study error: {0}")]
    Study(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input data rather than a failed computation.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Load { .. }
                | Error::AlignmentMismatch { .. }
                | Error::InvalidInterval { .. }
                | Error::Input(_)
                | Error::Aggregation(_)
                | Error::Batch(_)
                | Error::NoOverlap
                | Error::Span { .. }
                | Error::Format { .. }
                | Error::Path { .. }
                | Error::Json(_)
                | Error::Csv(_)
                | Error::Wav(_)
        )
    }
}

pub(crate) trait PathContext<T> {
    fn with_path(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> PathContext<T> for std::result::Result<T, std::io::Error> {
    fn with_path(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Path {
            path: path.into(),
            source,
        })
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// One problem found while validating a configuration, tagged with the
/// dotted path of the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

impl ConfigIssue {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("catalog error: {0}")]
    Catalog(String),

    #[error("row {row}: {message}")]
    Record { row: usize, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("invalid configuration: {}", format_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid model state: {0}")]
    State(String),

    #[error("non-finite loss in {stage} (epoch {epoch}, batch {batch})")]
    NonFiniteLoss {
        stage: String,
        epoch: usize,
        batch: usize,
    },

    #[error("training error: {0}")]
    Training(String),

    #[error("attempt budget exhausted for class {class}: kept {achieved} of {target}")]
    BudgetExhausted {
        class: String,
        achieved: usize,
        target: usize,
    },

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("export error: {0}")]
    Export(String),

    #[error("pipeline stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
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

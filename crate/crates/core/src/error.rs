//! Error type shared across the library.

use thiserror::Error;

/// All fallible operations in this crate return [`Result`] with this error.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A CSV row failed to parse; carries file and 1-based line number.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse { path: String, line: u64, msg: String },

    /// Input data violated a structural invariant (crossed book, empty
    /// timestamp intersection, non-monotone grid, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A loss or gradient became non-finite; parameters are left untouched.
    #[error("numerical error: {0}")]
    NonFinite(String),

    /// Checkpoint file is missing, truncated, or has an unexpected layout.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    /// A pipeline stage failed; wraps the underlying cause with the stage name.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CoreError>,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str) -> CoreError {
        CoreError::Stage { stage: stage.to_string(), source: Box::new(self) }
    }
}

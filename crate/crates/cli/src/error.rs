use glmm_deriv::GlmmError;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] GlmmError),

    /// Problems reading the data file; `line` is the 1-based line in the CSV.
    #[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Ingestion { line: Option<u64>, message: String },

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn ingestion(line: Option<u64>, message: impl Into<String>) -> Self {
        Self::Ingestion { line, message: message.into() }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Self::Model(e) => e.category(),
            Self::Ingestion { .. } => "ingestion",
            Self::Config(_) => "config",
            Self::Io(_) => "io",
        }
    }

    /// Machine-readable report written to stderr on failure.
    pub fn to_json(&self) -> Value {
        let mut body = json!({ "category": self.category(), "message": self.to_string() });
        if let Self::Ingestion { line: Some(l), .. } = self {
            body["line"] = json!(l);
        }
        json!({ "error": body })
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

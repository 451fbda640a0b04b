//! Command failures and their machine-readable form.

use std::fmt;
use std::path::Path;

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Unreadable, unknown or invalid configuration.
    Config,
    /// Missing or unwritable files.
    Io,
    /// Malformed input data (trace or model files).
    Input,
    /// The scenario could not be simulated.
    Infeasible,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Input, message)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(ErrorKind::Io, format!("{}: {err}", path.display()))
    }

    /// One-line JSON record written to stderr on failure.
    pub fn record(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Io => 3,
            ErrorKind::Input => 4,
            ErrorKind::Infeasible => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<capsched_core::sim::SimError> for CliError {
    fn from(e: capsched_core::sim::SimError) -> Self {
        use capsched_core::sim::SimError;
        match e {
            SimError::Config(_) | SimError::InvalidSpec(..) => Self::config(e.to_string()),
            SimError::Trace(_) => Self::input(e.to_string()),
            other => Self::new(ErrorKind::Infeasible, other.to_string()),
        }
    }
}

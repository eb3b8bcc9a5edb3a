use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::guardrails::Violation;
use crate::ledger::ParseError;
use crate::manifest::ManifestError;
use crate::report::ReportErrors;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Manifest(#[from] ManifestError),

    #[error(transparent)]
    Commit(#[from] ParseError),

    #[error(transparent)]
    Report(#[from] ReportErrors),

    #[error("git {command} failed: {stderr}")]
    Git { command: String, stderr: String },

    #[error("{}", format_violations(.0))]
    Violations(Vec<Violation>),

    #[error("prompt asset {id}: {reason}")]
    Asset { id: String, reason: String },

    #[error("refusing to initialize {}: directory is not empty", .0.display())]
    NotEmpty(PathBuf),

    #[error("no workspace found at or above {}", .0.display())]
    NoWorkspace(PathBuf),

    #[error("{0}")]
    Conflict(String),

    #[error("{0}")]
    Invalid(String),

    #[error("{0}")]
    NotFound(String),

    #[error("workspace artifacts are inconsistent:\n{}", .0.join("\n"))]
    Inconsistent(Vec<String>),

    #[error("sandbox policy: {0}")]
    Policy(String),

    #[error("transport: {0}")]
    Transport(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error is a refusal by one or more blocking guardrails.
    pub fn is_violation(&self) -> bool {
        matches!(self, Error::Violations(_))
    }
}

fn format_violations(violations: &[Violation]) -> String {
    let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
    format!("refused by guardrails:\n{}", lines.join("\n"))
}

/// Attach a path to an `io::Result`.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}

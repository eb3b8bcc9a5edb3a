//! Workspace harness for running a CLI coding agent as an autonomous research
//! assistant.
//!
//! The harness keeps all research state on disk so it survives context resets:
//! an instruction file, a `report.tex` with one subsection per experiment, a
//! `TODO.md` checklist, and a git history in which every experiment is one
//! commit with a structured subject line. Guardrail hooks check the workspace
//! after file edits, experiment runs and before commits, and a small scheduler
//! hands independent experiments to local GPUs or remote nodes.

pub mod agent;
pub mod assets;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod fsutil;
pub mod git;
pub mod guardrails;
pub mod ledger;
pub mod manifest;
pub mod report;
pub mod scheduler;
pub mod supervisor;
pub mod workspace;

pub use error::{Error, Result};
pub use guardrails::{RuleId, Severity, Trigger, Violation};
pub use ledger::{CommitMessage, ExperimentId, ExperimentRecord};
pub use manifest::ProjectManifest;
pub use workspace::{SessionState, Workspace};

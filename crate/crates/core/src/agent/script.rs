//! Scripted fake agent: a fixed list of actions replayed against a workspace.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Create or overwrite a workspace-relative file.
    WriteFile { path: String, content: String },
    /// Replace the first occurrence of `find`; fails if absent.
    ReplaceInFile { path: String, find: String, replace: String },
    /// Run a shell command in the workspace under the sandbox.
    RunCommand { command: String },
    Message { text: String },
    End,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentScript {
    pub actions: Vec<Action>,
}

impl AgentScript {
    pub fn new(actions: Vec<Action>) -> Self {
        AgentScript { actions }
    }

    /// Scripts are JSON (`{"actions": [...]}`) or TOML (`[[actions]]`),
    /// picked by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let script: AgentScript = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?
        };
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.actions.iter().enumerate() {
            match a {
                Action::WriteFile { path, .. } | Action::ReplaceInFile { path, .. }
                    if !crate::fsutil::is_workspace_relative(path) =>
                {
                    return Err(Error::Invalid(format!(
                        "action {}: `{path}` is not a workspace-relative path",
                        i + 1
                    )));
                }
                Action::ReplaceInFile { find, .. } if find.is_empty() => {
                    return Err(Error::Invalid(format!("action {}: empty search string", i + 1)));
                }
                Action::RunCommand { command } if command.trim().is_empty() => {
                    return Err(Error::Invalid(format!("action {}: empty command", i + 1)));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

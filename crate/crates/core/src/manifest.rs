//! `harness-manifest`: the researcher-provided project description.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::fsutil::is_workspace_relative;
use crate::ledger::is_metric_name;

pub const MANIFEST_FILE: &str = "harness-manifest";
pub const DEFAULT_PROBE: &str =
    "nvidia-smi --query-gpu=index,memory.used,utilization.gpu --format=csv,noheader,nounits";
pub const DEFAULT_NODE_ENV: &str = "SLURM_JOB_NODELIST";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("manifest field `{field}`: {reason}")]
pub struct ManifestError {
    pub field: String,
    pub reason: String,
}

fn bad(field: impl Into<String>, reason: impl Into<String>) -> ManifestError {
    ManifestError {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectManifest {
    pub name: String,
    pub research_question: String,
    pub metric_names: Vec<String>,
    #[serde(default)]
    pub protected_paths: Vec<String>,
    #[serde(default = "default_probe")]
    pub gpu_probe_command: String,
    #[serde(default = "default_node_env")]
    pub node_env_var: String,
    /// Extra instruction file names (e.g. `CLAUDE.md`) created as copies of
    /// `INSTRUCTIONS.md` for agents that look for their own file name.
    #[serde(default)]
    pub agent_aliases: Vec<String>,
    #[serde(default)]
    pub tier_budgets: TierBudgets,
    #[serde(default)]
    pub tiers: Vec<TierCommand>,
    #[serde(default)]
    pub variables: VariableConfig,
    #[serde(default)]
    pub sandbox: SandboxConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
}

fn default_probe() -> String {
    DEFAULT_PROBE.to_string()
}

fn default_node_env() -> String {
    DEFAULT_NODE_ENV.to_string()
}

/// Wall-clock budgets in seconds. Tier 3 is unlimited unless set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierBudgets {
    pub tier1: u64,
    pub tier2: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier3: Option<u64>,
}

impl Default for TierBudgets {
    fn default() -> Self {
        TierBudgets {
            tier1: 120,
            tier2: 1800,
            tier3: None,
        }
    }
}

impl TierBudgets {
    pub fn for_tier(&self, tier: u8) -> Option<u64> {
        match tier {
            1 => Some(self.tier1),
            2 => Some(self.tier2),
            _ => self.tier3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierCommand {
    pub tier: u8,
    pub command: String,
    #[serde(default)]
    pub metrics: Vec<MetricPattern>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricPattern {
    pub name: String,
    /// Regex with one capture group for the value. Defaults to `^name=value`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
}

/// Declares which configuration files define the experiment's variables and
/// how their keys are grouped into "one variable".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableConfig {
    #[serde(default)]
    pub config_files: Vec<String>,
    #[serde(default)]
    pub groups: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub container_image: Option<String>,
    #[serde(default = "default_runtime")]
    pub runtime: String,
    /// Hosts the sandbox may reach. Empty means no network.
    #[serde(default)]
    pub network_allow: Vec<String>,
    #[serde(default = "default_env_allow")]
    pub env_allow: Vec<String>,
}

fn default_runtime() -> String {
    "docker".to_string()
}

fn default_env_allow() -> Vec<String> {
    ["PATH", "HOME", "LANG", "LC_ALL", "TERM", "USER", "CUDA_VISIBLE_DEVICES"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            container_image: None,
            runtime: default_runtime(),
            network_allow: Vec::new(),
            env_allow: default_env_allow(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(default)]
    pub gpus_per_node: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub container_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote_root: Option<String>,
}

impl ProjectManifest {
    pub fn new(name: &str, research_question: &str, metric_names: &[&str]) -> Self {
        ProjectManifest {
            name: name.to_string(),
            research_question: research_question.to_string(),
            metric_names: metric_names.iter().map(|s| s.to_string()).collect(),
            protected_paths: Vec::new(),
            gpu_probe_command: default_probe(),
            node_env_var: default_node_env(),
            agent_aliases: Vec::new(),
            tier_budgets: TierBudgets::default(),
            tiers: Vec::new(),
            variables: VariableConfig::default(),
            sandbox: SandboxConfig::default(),
            cluster: ClusterConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let manifest: ProjectManifest = toml::from_str(text).map_err(|e| {
            Error::Manifest(bad(
                e.span()
                    .map(|s| format!("bytes {}..{}", s.start, s.end))
                    .unwrap_or_else(|| "document".into()),
                e.message().to_string(),
            ))
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let is_ident = |s: &str| {
            !s.is_empty()
                && s
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        };
        if self.name.trim().is_empty() {
            return Err(bad("name", "must be non-empty"));
        }
        if !is_ident(&self.name) {
            return Err(bad("name", "must be an identifier ([A-Za-z0-9_.-])"));
        }
        if self.metric_names.is_empty() {
            return Err(bad("metric_names", "at least one metric is required"));
        }
        let mut seen = BTreeSet::new();
        for m in &self.metric_names {
            if !is_metric_name(m) {
                return Err(bad("metric_names", format!("`{m}` is not a valid metric name")));
            }
            if !seen.insert(m) {
                return Err(bad("metric_names", format!("`{m}` listed twice")));
            }
        }
        for p in &self.protected_paths {
            if !is_workspace_relative(p) {
                return Err(bad(
                    "protected_paths",
                    format!("`{p}` must be workspace-relative without `..`"),
                ));
            }
        }
        let b = &self.tier_budgets;
        if b.tier1 == 0 || b.tier1 >= b.tier2 || b.tier3.is_some_and(|t3| t3 <= b.tier2) {
            return Err(bad(
                "tier_budgets",
                "budgets must be positive and strictly increasing from tier 1 to tier 3",
            ));
        }
        let mut tiers = BTreeSet::new();
        for t in &self.tiers {
            if !(1..=3).contains(&t.tier) {
                return Err(bad("tiers", format!("tier {} is not 1, 2 or 3", t.tier)));
            }
            if !tiers.insert(t.tier) {
                return Err(bad("tiers", format!("tier {} declared twice", t.tier)));
            }
            if t.command.trim().is_empty() {
                return Err(bad("tiers", format!("tier {} has an empty command", t.tier)));
            }
            for m in &t.metrics {
                if !is_metric_name(&m.name) {
                    return Err(bad("tiers", format!("`{}` is not a valid metric name", m.name)));
                }
                if let Some(p) = &m.pattern {
                    let re = regex::Regex::new(p)
                        .map_err(|e| bad("tiers", format!("pattern for `{}`: {e}", m.name)))?;
                    if re.captures_len() < 2 {
                        return Err(bad(
                            "tiers",
                            format!("pattern for `{}` needs a capture group", m.name),
                        ));
                    }
                }
            }
        }
        for alias in &self.agent_aliases {
            if !is_workspace_relative(alias) || alias.contains('/') {
                return Err(bad("agent_aliases", format!("`{alias}` must be a plain file name")));
            }
        }
        for f in &self.variables.config_files {
            if !is_workspace_relative(f) {
                return Err(bad("variables.config_files", format!("`{f}` must be workspace-relative")));
            }
            globset::Glob::new(f).map_err(|e| bad("variables.config_files", e.to_string()))?;
        }
        for (group, patterns) in &self.variables.groups {
            if !is_ident(group) {
                return Err(bad("variables.groups", format!("`{group}` is not an identifier")));
            }
            for p in patterns {
                globset::Glob::new(p)
                    .map_err(|e| bad("variables.groups", format!("{group}: {e}")))?;
            }
        }
        if self.node_env_var.is_empty() {
            return Err(bad("node_env_var", "must be non-empty"));
        }
        Ok(())
    }

    pub fn tier_command(&self, tier: u8) -> Option<&TierCommand> {
        self.tiers.iter().find(|t| t.tier == tier)
    }
}

//! Per-group digests of the experiment's configuration, for the
//! one-variable-per-experiment rule.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use globset::{Glob, GlobSet, GlobSetBuilder};

use super::{RuleId, Severity, Violation};
use crate::error::{Error, IoContext, Result};
use crate::fsutil::sha256_hex;
use crate::git::Git;
use crate::manifest::{ProjectManifest, VariableConfig, MANIFEST_FILE};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableManifest {
    /// Group name → digest of the group's keys and values.
    pub groups: BTreeMap<String, String>,
    /// Digest of the grouping rules the manifest was built with.
    pub schema: String,
    /// False when none of the declared config files exist; such a manifest is
    /// a baseline and any child may follow it.
    pub present: bool,
}

fn schema_digest(cfg: &VariableConfig) -> String {
    let mut s = String::new();
    for f in &cfg.config_files {
        s.push_str(&format!("file {f}\n"));
    }
    for (g, pats) in &cfg.groups {
        s.push_str(&format!("group {g} {}\n", pats.join(" ")));
    }
    sha256_hex(s.as_bytes())
}

fn globset(patterns: &[String]) -> Result<GlobSet> {
    let mut b = GlobSetBuilder::new();
    for p in patterns {
        b.add(Glob::new(p).map_err(|e| Error::Invalid(format!("pattern `{p}`: {e}")))?);
    }
    b.build().map_err(|e| Error::Invalid(e.to_string()))
}

fn flatten_toml(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_toml(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn flatten_json(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// `file:key` → canonical value for structured files; `file` → content
/// digest for anything else.
fn flatten(path: &str, bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    let mut keys = BTreeMap::new();
    let bad = |e: String| Error::Invalid(format!("{path}: {e}"));
    if path.ends_with(".toml") {
        let text = std::str::from_utf8(bytes).map_err(|e| bad(e.to_string()))?;
        let v: toml::Value = text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| bad(e.to_string()))?;
        flatten_toml("", &v, &mut keys);
    } else if path.ends_with(".json") {
        let v: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| bad(e.to_string()))?;
        flatten_json("", &v, &mut keys);
    } else {
        keys.insert(String::new(), sha256_hex(bytes));
        return Ok(keys.into_iter().map(|(_, v)| (path.to_string(), v)).collect());
    }
    Ok(keys.into_iter().map(|(k, v)| (format!("{path}:{k}"), v)).collect())
}

impl VariableManifest {
    pub fn from_groups(schema: impl Into<String>, groups: BTreeMap<String, String>) -> Self {
        VariableManifest {
            groups,
            schema: schema.into(),
            present: true,
        }
    }

    /// Build from `(workspace-relative path, content)` pairs already filtered
    /// to the declared config files.
    pub fn from_sources(sources: &[(String, Vec<u8>)], cfg: &VariableConfig) -> Result<Self> {
        let mut keys = BTreeMap::new();
        for (path, bytes) in sources {
            keys.extend(flatten(path, bytes)?);
        }
        let matchers: Vec<(&String, GlobSet)> = cfg
            .groups
            .iter()
            .map(|(g, pats)| Ok((g, globset(pats)?)))
            .collect::<Result<_>>()?;
        let mut members: BTreeMap<String, Vec<String>> = cfg.groups.keys().map(|g| (g.clone(), Vec::new())).collect();
        for (key, value) in &keys {
            let bare = key.split_once(':').map(|(_, k)| k).unwrap_or(key);
            let group = matchers
                .iter()
                .find(|(_, set)| set.is_match(key) || set.is_match(bare))
                .map(|(g, _)| (*g).clone())
                .unwrap_or_else(|| key.clone());
            members.entry(group).or_default().push(format!("{key}\0{value}\n"));
        }
        let groups = members
            .into_iter()
            .map(|(g, lines)| (g, sha256_hex(lines.concat().as_bytes())))
            .collect();
        Ok(VariableManifest {
            groups,
            schema: schema_digest(cfg),
            present: !sources.is_empty(),
        })
    }

    pub fn from_worktree(root: &Path, cfg: &VariableConfig) -> Result<Self> {
        if cfg.config_files.is_empty() {
            return Self::from_sources(&[], cfg);
        }
        let set = globset(&cfg.config_files)?;
        let mut sources = Vec::new();
        let walker = walkdir::WalkDir::new(root).sort_by_file_name().into_iter().filter_entry(|e| {
            let name = e.file_name().to_string_lossy();
            e.depth() == 0 || !(name == ".git" || name == "logs" || name == ".worktrees")
        });
        for entry in walker {
            let entry = entry.map_err(|e| Error::Invalid(e.to_string()))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
            let rel = rel.to_string_lossy().replace('\\', "/");
            if set.is_match(&rel) {
                let bytes = fs::read(entry.path()).at(entry.path())?;
                sources.push((rel, bytes));
            }
        }
        Self::from_sources(&sources, cfg)
    }

    /// Manifest of the configuration as committed, grouped by the manifest
    /// in force at that commit.
    pub fn from_commit(git: &Git, commit: &str) -> Result<Self> {
        let cfg = match git.show_file(commit, MANIFEST_FILE)? {
            Some(bytes) => {
                let text = String::from_utf8_lossy(&bytes);
                ProjectManifest::parse(&text)?.variables
            }
            None => VariableConfig::default(),
        };
        let set = globset(&cfg.config_files)?;
        let mut sources = Vec::new();
        if !cfg.config_files.is_empty() {
            for path in git.ls_tree(commit)? {
                if set.is_match(&path) {
                    if let Some(bytes) = git.show_file(commit, &path)? {
                        sources.push((path, bytes));
                    }
                }
            }
        }
        Self::from_sources(&sources, &cfg)
    }

    /// Digest over all groups, recorded with each experiment.
    pub fn digest(&self) -> String {
        let s: String = self.groups.iter().map(|(g, d)| format!("{g}  {d}\n")).collect();
        sha256_hex(s.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableCheck {
    pub changed: BTreeSet<String>,
    pub violation: Option<Violation>,
}

/// Groups that differ between `parent` and `child`. More than one changed
/// group is a violation; none is allowed only for seed replications.
pub fn check_one_variable(parent: &VariableManifest, child: &VariableManifest, replicate: bool) -> Result<VariableCheck> {
    if parent.schema != child.schema {
        return Err(Error::Invalid(
            "variable groups changed between parent and child; compare experiments under the same grouping".into(),
        ));
    }
    if !parent.present {
        return Ok(VariableCheck {
            changed: child.groups.keys().cloned().collect(),
            violation: None,
        });
    }
    let names: BTreeSet<&String> = parent.groups.keys().chain(child.groups.keys()).collect();
    let changed: BTreeSet<String> = names
        .into_iter()
        .filter(|g| parent.groups.get(*g) != child.groups.get(*g))
        .cloned()
        .collect();
    let violation = if changed.len() > 1 {
        Some(Violation::new(
            RuleId::OneVariable,
            Severity::Block,
            "config",
            format!(
                "{} variable groups changed ({}); change exactly one thing per experiment",
                changed.len(),
                changed.iter().cloned().collect::<Vec<_>>().join(", ")
            ),
        ))
    } else if changed.is_empty() && !replicate {
        Some(Violation::new(
            RuleId::OneVariable,
            Severity::Block,
            "config",
            "no variable group changed; mark the experiment as a replicate if it only re-runs the parent",
        ))
    } else {
        None
    };
    Ok(VariableCheck { changed, violation })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> VariableConfig {
        let mut groups = BTreeMap::new();
        groups.insert("optimizer".to_string(), vec!["optimizer.*".to_string()]);
        groups.insert("schedule".to_string(), vec!["lr.*".to_string(), "warmup".to_string()]);
        VariableConfig {
            config_files: vec!["config/*.toml".into()],
            groups,
        }
    }

    fn manifest(text: &str) -> VariableManifest {
        VariableManifest::from_sources(&[("config/train.toml".into(), text.as_bytes().to_vec())], &cfg()).unwrap()
    }

    const BASE: &str = "warmup = 100\nseed = 1\n[optimizer]\nname = \"adamw\"\n[lr]\npeak = 0.001\n";

    #[test]
    fn single_group_change_passes() {
        let a = manifest(BASE);
        let b = manifest(&BASE.replace("adamw", "muon"));
        let r = check_one_variable(&a, &b, false).unwrap();
        assert_eq!(r.changed, BTreeSet::from(["optimizer".to_string()]));
        assert!(r.violation.is_none());
    }

    #[test]
    fn coupled_keys_are_one_group() {
        let a = manifest(BASE);
        let b = manifest(&BASE.replace("0.001", "0.002").replace("100", "200"));
        let r = check_one_variable(&a, &b, false).unwrap();
        assert_eq!(r.changed.len(), 1);
    }

    #[test]
    fn two_groups_violate() {
        let a = manifest(BASE);
        let b = manifest(&BASE.replace("adamw", "muon").replace("0.001", "0.002"));
        let r = check_one_variable(&a, &b, false).unwrap();
        assert!(r.violation.unwrap().detail.contains("Commandment VI"));
    }

    #[test]
    fn ungrouped_key_is_its_own_group() {
        let a = manifest(BASE);
        let b = manifest(&BASE.replace("seed = 1", "seed = 2"));
        let r = check_one_variable(&a, &b, false).unwrap();
        assert_eq!(r.changed, BTreeSet::from(["config/train.toml:seed".to_string()]));
    }

    #[test]
    fn replicate_flag() {
        let a = manifest(BASE);
        assert!(check_one_variable(&a, &a, false).unwrap().violation.is_some());
        assert!(check_one_variable(&a, &a, true).unwrap().violation.is_none());
    }

    #[test]
    fn deterministic_and_schema_checked() {
        assert_eq!(manifest(BASE), manifest(BASE));
        let mut other = manifest(BASE);
        other.schema = "x".into();
        assert!(check_one_variable(&manifest(BASE), &other, false).is_err());
    }
}

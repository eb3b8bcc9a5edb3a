//! Digest lock on evaluation-defining files, with human-authored unlock
//! tokens as the only way to change a locked digest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RuleId, Severity, Violation};
use crate::error::{Error, IoContext, Result};
use crate::fsutil::{atomic_write, digest_path};
use crate::workspace::Workspace;

pub const LOCKFILE: &str = "locks/protected.sum";
pub const UNLOCK_DIR: &str = "locks/unlocks";
/// Digest recorded for a protected path that does not exist.
pub const ABSENT: &str = "absent";

/// `locks/unlocks/<name>.unlock`, written by a human outside the sandbox.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlockToken {
    pub path: String,
    pub digest: String,
    pub reason: String,
}

pub fn parse_lockfile(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (digest, path) = line
            .split_once("  ")
            .ok_or_else(|| Error::Invalid(format!("{LOCKFILE}:{}: expected `<digest>  <path>`", i + 1)))?;
        out.insert(path.to_string(), digest.to_string());
    }
    Ok(out)
}

pub fn render_lockfile(entries: &BTreeMap<String, String>) -> String {
    entries.iter().map(|(p, d)| format!("{d}  {p}\n")).collect()
}

pub fn read_lockfile(ws: &Workspace) -> Result<BTreeMap<String, String>> {
    let path = ws.root().join(LOCKFILE);
    match fs::read_to_string(&path) {
        Ok(text) => parse_lockfile(&text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::Inconsistent(vec![format!(
            "{LOCKFILE} is missing; the workspace is corrupt"
        )])),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn write_lockfile(root: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    atomic_write(&root.join(LOCKFILE), render_lockfile(entries).as_bytes())
}

pub fn current_digest(root: &Path, rel: &str) -> Result<String> {
    let p = root.join(rel);
    Ok(digest_path(&p).at(&p)?.unwrap_or_else(|| ABSENT.to_string()))
}

pub fn load_unlock_tokens(root: &Path) -> Result<Vec<(PathBuf, UnlockToken)>> {
    let dir = root.join(UNLOCK_DIR);
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "unlock"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).at(&p)?;
            let token: UnlockToken =
                toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {}", p.display(), e.message())))?;
            Ok((p, token))
        })
        .collect()
}

fn overlaps(touched: &str, protected: &str) -> bool {
    let t = touched.trim_end_matches('/');
    let p = protected.trim_end_matches('/');
    t == p || t.starts_with(&format!("{p}/")) || p.starts_with(&format!("{t}/"))
}

/// A lockfile change sanctioned by an unlock token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rotation {
    pub path: String,
    pub digest: String,
    pub token: usize,
}

/// Pure decision: violations for touched protected paths whose current digest
/// differs from the locked one, unless a token names that path and digest.
pub fn evaluate_protected(
    locked: &BTreeMap<String, String>,
    current: &BTreeMap<String, String>,
    tokens: &[UnlockToken],
    touched: &[String],
) -> (Vec<Violation>, Vec<Rotation>) {
    let mut violations = Vec::new();
    let mut rotations = Vec::new();
    for (path, digest) in locked {
        if !touched.iter().any(|t| overlaps(t, path)) {
            continue;
        }
        let now = current.get(path).map(String::as_str).unwrap_or(ABSENT);
        if now == digest {
            continue;
        }
        match tokens.iter().position(|t| &t.path == path && t.digest == now) {
            Some(token) => rotations.push(Rotation {
                path: path.clone(),
                digest: now.to_string(),
                token,
            }),
            None => violations.push(Violation::new(
                RuleId::ProtectedEval,
                Severity::Block,
                path.clone(),
                format!(
                    "protected path changed (locked {}, now {}); evaluation files change only with a human-authored unlock token in {UNLOCK_DIR}/",
                    short(digest),
                    short(now)
                ),
            )),
        }
    }
    (violations, rotations)
}

fn short(d: &str) -> &str {
    &d[..d.len().min(12)]
}

/// Check touched paths against the lockfile. Sanctioned changes rotate the
/// lockfile and move their token to `locks/unlocks/applied/`.
pub fn check_protected(ws: &Workspace, touched: &[String]) -> Result<Vec<Violation>> {
    let mut locked = read_lockfile(ws)?;
    let root = ws.root();
    let mut current = BTreeMap::new();
    for path in locked.keys() {
        if touched.iter().any(|t| overlaps(t, path)) {
            current.insert(path.clone(), current_digest(root, path)?);
        }
    }
    let tokens = load_unlock_tokens(root)?;
    let plain: Vec<UnlockToken> = tokens.iter().map(|(_, t)| t.clone()).collect();
    let (violations, rotations) = evaluate_protected(&locked, &current, &plain, touched);
    if !rotations.is_empty() {
        let applied = root.join(UNLOCK_DIR).join("applied");
        fs::create_dir_all(&applied).at(&applied)?;
        for r in &rotations {
            locked.insert(r.path.clone(), r.digest.clone());
        }
        write_lockfile(root, &locked)?;
        let mut moved = std::collections::BTreeSet::new();
        for r in &rotations {
            if moved.insert(r.token) {
                let from = &tokens[r.token].0;
                let to = applied.join(from.file_name().expect("token file name"));
                fs::rename(from, &to).at(from)?;
            }
        }
    }
    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn decision_table() {
        let locked = map(&[("eval/config", "aaa")]);
        let touched = vec!["eval/config".to_string()];
        let (v, r) = evaluate_protected(&locked, &map(&[("eval/config", "aaa")]), &[], &touched);
        assert!(v.is_empty() && r.is_empty());
        let (v, _) = evaluate_protected(&locked, &map(&[("eval/config", "bbb")]), &[], &touched);
        assert_eq!(v.len(), 1);
        assert!(v[0].detail.contains("Commandment II"));
        let (v, _) = evaluate_protected(&locked, &map(&[("eval/config", "bbb")]), &[], &["src/model".to_string()]);
        assert!(v.is_empty());
        let token = UnlockToken {
            path: "eval/config".into(),
            digest: "bbb".into(),
            reason: "new split".into(),
        };
        let (v, r) = evaluate_protected(&locked, &map(&[("eval/config", "bbb")]), &[token.clone()], &touched);
        assert!(v.is_empty());
        assert_eq!(r, vec![Rotation { path: "eval/config".into(), digest: "bbb".into(), token: 0 }]);
        let (v, _) = evaluate_protected(&locked, &map(&[("eval/config", "ccc")]), &[token], &touched);
        assert_eq!(v.len(), 1);
    }

    #[test]
    fn directory_overlap() {
        assert!(overlaps("eval/data/test.csv", "eval"));
        assert!(overlaps("eval", "eval/config"));
        assert!(!overlaps("evaluation", "eval"));
    }

    #[test]
    fn lockfile_roundtrip() {
        let m = map(&[("eval/config", "ab12"), ("data/test", ABSENT)]);
        assert_eq!(parse_lockfile(&render_lockfile(&m)).unwrap(), m);
    }
}

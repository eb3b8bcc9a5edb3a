//! Workspace creation, discovery and session bootstrap.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assets::{load_assets, Domain, DEFAULT_HOOKS, REPORT_TEMPLATE, WORKFLOW_GUIDE};
use crate::error::{Error, IoContext, Result};
use crate::fsutil::{atomic_write, FileLock};
use crate::git::Git;
use crate::guardrails::{self, HookContext, Trigger, Violation, ABSENT, HOOKS_FILE};
use crate::ledger::{self, ExperimentId, ExperimentRecord};
use crate::manifest::{ProjectManifest, MANIFEST_FILE};
use crate::report::{parse_report, TodoItem, TodoList, REPORT_FILE, TODO_FILE};

pub const INSTRUCTIONS_FILE: &str = "INSTRUCTIONS.md";
pub const INIT_COMMIT: &str = "chore: initialize research workspace";
const STATE_DIR: &str = "expharness";

const UNIVERSAL_BEGIN: &str = "<!-- expharness:universal:begin -->";
const UNIVERSAL_END: &str = "<!-- expharness:universal:end -->";
const PROJECT_BEGIN: &str = "<!-- expharness:project:begin -->";
const PROJECT_END: &str = "<!-- expharness:project:end -->";
pub const EMPTY_PLACEHOLDER: &str = "<!-- EMPTY: project-specific instructions go here (`exh instructions fill`) -->";

/// An initialized workspace: a directory holding `harness-manifest`.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    manifest: ProjectManifest,
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Self> {
        let root = root.canonicalize().at(root)?;
        let manifest = ProjectManifest::load(&root.join(MANIFEST_FILE))?;
        Ok(Workspace { root, manifest })
    }

    /// Nearest ancestor of `start` containing a manifest.
    pub fn discover(start: &Path) -> Result<Self> {
        let start = start.canonicalize().at(start)?;
        let mut dir = Some(start.as_path());
        while let Some(d) = dir {
            if d.join(MANIFEST_FILE).is_file() {
                return Self::open(d);
            }
            dir = d.parent();
        }
        Err(Error::NoWorkspace(start))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &ProjectManifest {
        &self.manifest
    }

    pub fn git(&self) -> Git {
        Git::new(&self.root)
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join(REPORT_FILE)
    }

    pub fn todo_path(&self) -> PathBuf {
        self.root.join(TODO_FILE)
    }

    pub fn instructions_path(&self) -> PathBuf {
        self.root.join(INSTRUCTIONS_FILE)
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }

    /// Harness state shared by all worktrees of the repository.
    pub fn state_dir(&self) -> Result<PathBuf> {
        let dir = self.git().common_dir()?.join(STATE_DIR);
        fs::create_dir_all(&dir).at(&dir)?;
        Ok(dir)
    }

    /// Checkout that owns the repository (the parent of the common git dir).
    pub fn main_root(&self) -> Result<PathBuf> {
        let common = self.git().common_dir()?;
        Ok(common.parent().map(Path::to_path_buf).unwrap_or_else(|| self.root.clone()))
    }

    /// Repository-wide advisory lock for ID allocation, commits and
    /// document edits.
    pub fn lock(&self) -> Result<FileLock> {
        FileLock::acquire(&self.state_dir()?.join("lock"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionFile {
    /// `(heading, body)` in canonical order.
    pub universal_sections: Vec<(String, String)>,
    /// `None` while the placeholder is in place.
    pub project_section: Option<String>,
}

fn render_instructions(universal: &[(String, String)], domain: Domain, project: Option<&str>) -> String {
    let mut out = String::from("# Research instructions\n\nRead this file at the start of every session.\n\n");
    out.push_str(UNIVERSAL_BEGIN);
    out.push_str("\n## Commandments\n");
    let n_universal = crate::assets::UNIVERSAL_IDS.len();
    for (i, (heading, body)) in universal.iter().enumerate() {
        if i == n_universal {
            out.push_str(&format!("\n## Domain commandments ({domain})\n"));
        }
        out.push_str(&format!("\n### {heading}\n\n{body}\n"));
    }
    out.push('\n');
    out.push_str(UNIVERSAL_END);
    out.push_str("\n\n");
    out.push_str(WORKFLOW_GUIDE.trim_end());
    out.push_str("\n\n");
    out.push_str(PROJECT_BEGIN);
    out.push_str("\n## Project instructions\n\n");
    out.push_str(project.unwrap_or(EMPTY_PLACEHOLDER));
    out.push('\n');
    out.push_str(PROJECT_END);
    out.push('\n');
    out
}

fn between<'a>(text: &'a str, begin: &str, end: &str) -> Result<&'a str> {
    let bad = || Error::Invalid(format!("{INSTRUCTIONS_FILE}: markers `{begin}` / `{end}` missing or duplicated"));
    let (_, rest) = text.split_once(begin).ok_or_else(bad)?;
    let (inner, after) = rest.split_once(end).ok_or_else(bad)?;
    if rest.contains(begin) && rest.find(begin) < rest.find(end) || after.contains(begin) {
        return Err(bad());
    }
    Ok(inner)
}

/// Parse an instruction file back into its sections.
pub fn parse_instructions(text: &str) -> Result<InstructionFile> {
    let universal = between(text, UNIVERSAL_BEGIN, UNIVERSAL_END)?;
    let mut sections = Vec::new();
    let mut current: Option<(String, String)> = None;
    for line in universal.split_inclusive('\n') {
        if let Some(h) = line.strip_prefix("### ") {
            if let Some(s) = current.take() {
                sections.push(s);
            }
            current = Some((h.trim_end().to_string(), String::new()));
        } else if line.starts_with("## ") {
            if let Some(s) = current.take() {
                sections.push(s);
            }
        } else if let Some((_, body)) = current.as_mut() {
            body.push_str(line);
        }
    }
    sections.extend(current);
    let sections = sections
        .into_iter()
        .map(|(h, b)| (h, b.trim_matches('\n').to_string()))
        .collect();
    let project = between(text, PROJECT_BEGIN, PROJECT_END)?;
    let body = project
        .trim_start_matches('\n')
        .strip_prefix("## Project instructions\n")
        .ok_or_else(|| Error::Invalid(format!("{INSTRUCTIONS_FILE}: project section heading missing")))?
        .trim_matches('\n');
    Ok(InstructionFile {
        universal_sections: sections,
        project_section: (body != EMPTY_PLACEHOLDER).then(|| body.to_string()),
    })
}

/// Extra options for [`init_workspace_with`].
#[derive(Debug, Clone, Default)]
pub struct InitOptions {
    /// Copy this directory's files into the workspace before protected
    /// digests are locked.
    pub import: Option<PathBuf>,
}

pub fn init_workspace(target: &Path, manifest: &ProjectManifest, domain: Domain) -> Result<PathBuf> {
    init_workspace_with(target, manifest, domain, &InitOptions::default())
}

fn latex_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\textbackslash{}"),
            '&' | '%' | '$' | '#' | '_' | '{' | '}' => {
                out.push('\\');
                out.push(c);
            }
            '~' => out.push_str("\\textasciitilde{}"),
            '^' => out.push_str("\\textasciicircum{}"),
            c => out.push(c),
        }
    }
    out
}

fn copy_tree(from: &Path, to: &Path) -> Result<()> {
    for entry in walkdir::WalkDir::new(from).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Invalid(e.to_string()))?;
        let rel = entry.path().strip_prefix(from).expect("walk stays under root");
        if rel.components().next().is_some_and(|c| c.as_os_str() == ".git") {
            continue;
        }
        let dest = to.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&dest).at(&dest)?;
        } else if entry.file_type().is_file() {
            if dest.exists() {
                return Err(Error::Conflict(format!("imported file {} collides with a harness file", rel.display())));
            }
            fs::copy(entry.path(), &dest).at(&dest)?;
        }
    }
    Ok(())
}

/// Create a new workspace in `target`, which must be empty or absent.
pub fn init_workspace_with(target: &Path, manifest: &ProjectManifest, domain: Domain, opts: &InitOptions) -> Result<PathBuf> {
    manifest.validate()?;
    let assets = load_assets()?;
    match fs::read_dir(target) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                return Err(Error::NotEmpty(target.to_path_buf()));
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => fs::create_dir_all(target).at(target)?,
        Err(e) => return Err(Error::io(target, e)),
    }
    let root = target.canonicalize().at(target)?;
    let result = populate(&root, manifest, domain, &assets, opts);
    if result.is_err() {
        // Leave the target as we found it: empty.
        if let Ok(entries) = fs::read_dir(&root) {
            for e in entries.flatten() {
                let p = e.path();
                let _ = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
            }
        }
    }
    result.map(|_| root)
}

fn populate(root: &Path, manifest: &ProjectManifest, domain: Domain, assets: &crate::assets::AssetSet, opts: &InitOptions) -> Result<()> {
    let universal: Vec<(String, String)> =
        assets.for_domain(domain).iter().map(|a| (a.heading(), a.body.clone())).collect();
    let instructions = render_instructions(&universal, domain, None);
    let write = |rel: &str, text: &str| atomic_write(&root.join(rel), text.as_bytes());
    write(INSTRUCTIONS_FILE, &instructions)?;
    for alias in &manifest.agent_aliases {
        write(alias, &instructions)?;
    }
    let report = REPORT_TEMPLATE
        .replace("{{NAME}}", &latex_escape(&manifest.name))
        .replace("{{RESEARCH_QUESTION}}", &latex_escape(manifest.research_question.trim()));
    parse_report(&report)?;
    write(REPORT_FILE, &report)?;
    write(TODO_FILE, &TodoList::empty().render())?;
    write(MANIFEST_FILE, &manifest.render())?;
    write(HOOKS_FILE, DEFAULT_HOOKS)?;
    write(".gitignore", "logs/\n.worktrees/\n")?;
    if let Some(src) = &opts.import {
        copy_tree(src, root)?;
    }
    let mut locked = BTreeMap::new();
    for p in &manifest.protected_paths {
        let digest = crate::fsutil::digest_path(&root.join(p)).at(root.join(p))?;
        locked.insert(p.clone(), digest.unwrap_or_else(|| ABSENT.to_string()));
    }
    guardrails::write_lockfile(root, &locked)?;
    fs::create_dir_all(root.join("logs")).at(root.join("logs"))?;
    let git = Git::new(root);
    git.init()?;
    git.add_all()?;
    git.commit(&format!("{INIT_COMMIT}\n"))?;
    Ok(())
}

/// Replace the EMPTY project section. Universal sections stay byte-identical.
pub fn fill_project_section(ws: &Workspace, text: &str, overwrite: bool) -> Result<InstructionFile> {
    let text = text.trim_matches('\n');
    if text.trim().is_empty() {
        return Err(Error::Invalid("project instructions must not be empty".into()));
    }
    if text.contains(PROJECT_END) || text.contains(PROJECT_BEGIN) || text.contains(UNIVERSAL_BEGIN) {
        return Err(Error::Invalid("project instructions must not contain harness markers".into()));
    }
    let _lock = ws.lock()?;
    let path = ws.instructions_path();
    let current = fs::read_to_string(&path).at(&path)?;
    let parsed = parse_instructions(&current)?;
    if parsed.project_section.is_some() && !overwrite {
        return Err(Error::Conflict(
            "the project section is already filled; pass the overwrite flag to replace it".into(),
        ));
    }
    let start = current.find(PROJECT_BEGIN).expect("parsed above");
    let end = current.find(PROJECT_END).expect("parsed above");
    let updated = format!(
        "{}{PROJECT_BEGIN}\n## Project instructions\n\n{text}\n{}",
        &current[..start],
        &current[end..]
    );
    let new = parse_instructions(&updated)?;
    debug_assert_eq!(new.universal_sections, parsed.universal_sections);
    atomic_write(&path, updated.as_bytes())?;
    for alias in &ws.manifest().agent_aliases {
        atomic_write(&ws.root().join(alias), updated.as_bytes())?;
    }
    Ok(new)
}

/// Everything a fresh session needs, rebuilt from `report.tex`, `TODO.md`
/// and the git history only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub experiments: Vec<ExperimentRecord>,
    pub open_todos: Vec<TodoItem>,
    pub current_branch: String,
    pub last_commit: String,
    pub pending_violations: Vec<Violation>,
    /// IDs with a subsection in `report.tex`, in document order.
    pub recorded_sections: Vec<ExperimentId>,
}

/// Rebuild session state. Any unparsable artifact fails the whole call with
/// every problem listed.
pub fn bootstrap_session(ws: &Workspace) -> Result<SessionState> {
    let mut problems = Vec::new();
    let git = ws.git();
    let scan = ledger::scan(&git)?;
    problems.extend(scan.problems());
    let report = fs::read_to_string(ws.report_path()).at(ws.report_path())?;
    let sections = match parse_report(&report) {
        Ok(doc) => doc.ids(),
        Err(errs) => {
            problems.extend(errs.0.iter().map(|e| e.to_string()));
            Vec::new()
        }
    };
    let todo = fs::read_to_string(ws.todo_path()).at(ws.todo_path())?;
    let todos = match TodoList::parse(&todo) {
        Ok(list) => list.open_items(),
        Err(errs) => {
            problems.extend(errs.0.iter().map(|e| format!("{TODO_FILE}: {e}")));
            Vec::new()
        }
    };
    if !problems.is_empty() {
        return Err(Error::Inconsistent(problems));
    }
    let mut pending = guardrails::evaluate_rules(ws, Trigger::SessionStart, &HookContext::default())?;
    pending.sort();
    Ok(SessionState {
        experiments: scan.records,
        open_todos: todos,
        current_branch: git.current_branch()?,
        last_commit: git.head()?.unwrap_or_default(),
        pending_violations: pending,
        recorded_sections: sections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instructions_roundtrip() {
        let assets = load_assets().unwrap();
        for domain in [Domain::Compute, Domain::Math] {
            let universal: Vec<(String, String)> =
                assets.for_domain(domain).iter().map(|a| (a.heading(), a.body.clone())).collect();
            let text = render_instructions(&universal, domain, None);
            let parsed = parse_instructions(&text).unwrap();
            assert_eq!(parsed.universal_sections, universal);
            assert_eq!(parsed.project_section, None);
            let text = render_instructions(&universal, domain, Some("Goal: beat AdamW"));
            assert_eq!(parse_instructions(&text).unwrap().project_section.as_deref(), Some("Goal: beat AdamW"));
        }
    }

    #[test]
    fn escapes_latex() {
        assert_eq!(latex_escape("50% of a_b & c"), "50\\% of a\\_b \\& c");
    }
}

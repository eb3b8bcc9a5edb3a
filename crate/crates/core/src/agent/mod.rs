//! Driving an external CLI coding agent, or a scripted stand-in.
//!
//! The harness never reads an agent's transcript. Events come from what can
//! be observed from outside: files changing in the workspace, commands run
//! through the supervisor, and the process ending. File edits and commands
//! are passed to the guardrail hooks before the next event is taken.

mod script;

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime};

use regex::Regex;
use serde::{Deserialize, Serialize};

pub use script::{Action, AgentScript};

use crate::assets::AGENT_CONFIGS;
use crate::error::{Error, IoContext, Result};
use crate::fsutil::{atomic_write, sha256_hex, shell_quote};
use crate::guardrails::{self, HookContext, Trigger, Violation};
use crate::supervisor::{self, KillReason, ProcessState, SandboxPolicy, SpawnOptions, SupervisedProcess};
use crate::workspace::Workspace;

/// Top-level entries never reported as agent edits.
const UNWATCHED: [&str; 3] = [".git", "logs", ".worktrees"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkdirMode {
    /// Run in the workspace root.
    Workspace,
    /// Run in a fresh ledger worktree on branch `agent/<name>`.
    Worktree,
}

/// How to launch one agent CLI. `instruction_arg` may contain
/// `{instructions}`, replaced by the instruction file's path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub binary: String,
    pub instruction_arg: String,
    pub workdir_mode: WorkdirMode,
}

impl AdapterConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Invalid(format!("agent config: {e}")))
    }

    /// A shipped agent name (`claude`, `codex`, `gemini`) or a path to a
    /// config file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if let Some((_, text)) = AGENT_CONFIGS.iter().find(|(n, _)| *n == name_or_path) {
            return Self::parse(text);
        }
        let p = Path::new(name_or_path);
        if p.is_file() {
            return Self::parse(&fs::read_to_string(p).at(p)?);
        }
        let known: Vec<&str> = AGENT_CONFIGS.iter().map(|(n, _)| *n).collect();
        Err(Error::NotFound(format!(
            "no agent `{name_or_path}` (shipped: {}; or pass a config file)",
            known.join(", ")
        )))
    }

    pub fn command(&self, instructions: &Path) -> String {
        let arg = self.instruction_arg.replace("{instructions}", &instructions.to_string_lossy());
        format!("{} {}", shell_quote(&self.binary), shell_quote(&arg))
    }
}

/// Resolve `binary` the way `sh` would.
pub fn find_binary(binary: &str) -> Option<PathBuf> {
    use std::os::unix::fs::PermissionsExt;
    let runnable = |p: &Path| p.metadata().is_ok_and(|m| m.is_file() && m.permissions().mode() & 0o111 != 0);
    if binary.contains('/') {
        let p = PathBuf::from(binary);
        return runnable(&p).then_some(p);
    }
    std::env::var_os("PATH")
        .iter()
        .flat_map(std::env::split_paths)
        .map(|d| d.join(binary))
        .find(|p| runnable(p))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    FileEdit { paths: Vec<String> },
    CommandRun { command: String, exit: i32 },
    Message { text: String },
    SessionEnd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentEvent {
    /// Position in the session, from 0.
    pub seq: u64,
    pub kind: EventKind,
    /// Time since the session started.
    pub at: Duration,
}

/// Content digests of every watched file.
pub type Snapshot = BTreeMap<String, String>;

pub fn snapshot(root: &Path) -> Result<Snapshot> {
    let mut out = Snapshot::new();
    let walk = walkdir::WalkDir::new(root).sort_by_file_name().into_iter().filter_entry(|e| {
        e.depth() != 1 || !UNWATCHED.iter().any(|u| e.file_name() == *u)
    });
    for entry in walk {
        let entry = entry.map_err(|e| Error::Invalid(format!("walking {}: {e}", root.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let bytes = fs::read(entry.path()).at(entry.path())?;
        out.insert(rel.to_string_lossy().into_owned(), sha256_hex(&bytes));
    }
    Ok(out)
}

/// Paths added, removed or changed between two snapshots, sorted.
pub fn changed_paths(before: &Snapshot, after: &Snapshot) -> Vec<String> {
    let mut out: Vec<String> = after
        .iter()
        .filter(|(k, v)| before.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .chain(before.keys().filter(|k| !after.contains_key(*k)).cloned())
        .collect();
    out.sort();
    out.dedup();
    out
}

/// Pass one event to the hooks. File edits go to `file_edit`, commands to
/// `experiment_run`.
pub fn forward(ws: &Workspace, event: &AgentEvent) -> Result<Vec<Violation>> {
    let (trigger, touched) = match &event.kind {
        EventKind::FileEdit { paths } => (Trigger::FileEdit, paths.clone()),
        EventKind::CommandRun { .. } => (Trigger::ExperimentRun, Vec::new()),
        _ => return Ok(Vec::new()),
    };
    let ctx = HookContext {
        touched,
        ..HookContext::default()
    };
    guardrails::run_hooks(ws, trigger, &ctx)
}

/// Why a replay stopped early.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Halt {
    /// A hook returned blocking violations for the event at `action`.
    Blocked { action: usize, violations: Vec<Violation> },
    /// The action was refused by the sandbox.
    Policy { action: usize, detail: String },
}

/// Replays an [`AgentScript`]. After a [`Halt::Blocked`], fix the workspace
/// and call [`FakeSession::resume`].
#[derive(Debug)]
pub struct FakeSession<'a> {
    ws: &'a Workspace,
    script: AgentScript,
    policy: SandboxPolicy,
    next: usize,
    started: Instant,
    pub events: Vec<AgentEvent>,
    pub halted: Option<Halt>,
    pending: Option<AgentEvent>,
    ended: bool,
}

impl<'a> FakeSession<'a> {
    pub fn new(ws: &'a Workspace, script: AgentScript) -> Result<Self> {
        script.validate()?;
        Ok(FakeSession {
            policy: SandboxPolicy::for_workspace(ws.root(), &ws.manifest().sandbox),
            ws,
            script,
            next: 0,
            started: Instant::now(),
            events: Vec::new(),
            halted: None,
            pending: None,
            ended: false,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.ended
    }

    fn emit(&mut self, kind: EventKind) -> AgentEvent {
        let e = AgentEvent {
            seq: self.events.len() as u64,
            kind,
            at: self.started.elapsed(),
        };
        self.events.push(e.clone());
        e
    }

    /// Emit and forward; a block halts at the current action.
    fn deliver(&mut self, kind: EventKind) -> Result<bool> {
        let e = self.emit(kind);
        let blocking = guardrails::blocking(forward(self.ws, &e)?);
        if blocking.is_empty() {
            return Ok(true);
        }
        self.halted = Some(Halt::Blocked {
            action: self.next,
            violations: blocking,
        });
        self.pending = Some(e);
        Ok(false)
    }

    fn write(&mut self, path: &str, content: &str) -> Result<bool> {
        let abs = self.ws.root().join(path);
        if !self.policy.may_write(&abs) {
            self.halted = Some(Halt::Policy {
                action: self.next,
                detail: format!("write to {path} is outside the sandbox write set"),
            });
            return Ok(false);
        }
        atomic_write(&abs, content.as_bytes())?;
        self.deliver(EventKind::FileEdit {
            paths: vec![path.to_string()],
        })
    }

    fn run_command(&mut self, command: &str) -> Result<bool> {
        let before = snapshot(self.ws.root())?;
        let log = PathBuf::from(format!("logs/agent/{:04}.log", self.next + 1));
        let proc = supervisor::spawn_with(&self.policy, command, &log, &SpawnOptions::default())?;
        let exit = match proc.wait()? {
            ProcessState::Exited(code) => code,
            ProcessState::Killed(KillReason::Policy(detail)) => {
                self.halted = Some(Halt::Policy {
                    action: self.next,
                    detail,
                });
                return Ok(false);
            }
            _ => -1,
        };
        if !self.deliver(EventKind::CommandRun {
            command: command.to_string(),
            exit,
        })? {
            return Ok(false);
        }
        let paths = changed_paths(&before, &snapshot(self.ws.root())?);
        if paths.is_empty() {
            return Ok(true);
        }
        self.deliver(EventKind::FileEdit { paths })
    }

    fn step(&mut self, action: Action) -> Result<bool> {
        match action {
            Action::WriteFile { path, content } => self.write(&path, &content),
            Action::ReplaceInFile { path, find, replace } => {
                let abs = self.ws.root().join(&path);
                let text = fs::read_to_string(&abs).at(&abs)?;
                if !text.contains(&find) {
                    return Err(Error::Invalid(format!(
                        "action {}: `{find}` not found in {path}",
                        self.next + 1
                    )));
                }
                self.write(&path, &text.replacen(&find, &replace, 1))
            }
            Action::RunCommand { command } => self.run_command(&command),
            Action::Message { text } => {
                self.emit(EventKind::Message { text });
                Ok(true)
            }
            Action::End => {
                self.finish();
                Ok(true)
            }
        }
    }

    fn finish(&mut self) {
        if !self.ended {
            self.emit(EventKind::SessionEnd);
            self.ended = true;
        }
    }

    /// Run until the script ends or something halts it.
    pub fn run(&mut self) -> Result<()> {
        if self.halted.is_some() {
            return Ok(());
        }
        while !self.ended {
            let Some(action) = self.script.actions.get(self.next).cloned() else {
                self.finish();
                break;
            };
            if !self.step(action)? {
                return Ok(());
            }
            self.next += 1;
        }
        Ok(())
    }

    /// Re-check the blocked event and, if it is clean now, continue with the
    /// next action. A policy halt is final.
    pub fn resume(&mut self) -> Result<()> {
        match &self.halted {
            Some(Halt::Blocked { action, .. }) => {
                let action = *action;
                let e = self.pending.clone().expect("blocked event kept");
                let blocking = guardrails::blocking(forward(self.ws, &e)?);
                if !blocking.is_empty() {
                    self.halted = Some(Halt::Blocked {
                        action,
                        violations: blocking,
                    });
                    return Ok(());
                }
                self.halted = None;
                self.pending = None;
                self.next = action + 1;
                self.run()
            }
            Some(Halt::Policy { .. }) => Ok(()),
            None => self.run(),
        }
    }
}

/// Replay `script` in `ws`; the session is returned finished or halted.
pub fn replay<'a>(ws: &'a Workspace, script: &AgentScript) -> Result<FakeSession<'a>> {
    let mut s = FakeSession::new(ws, script.clone())?;
    s.run()?;
    Ok(s)
}

/// A live external agent. Events are found by polling the workspace; a
/// blocking violation stops the agent's process group until
/// [`AgentSession::resume`] finds the workspace clean.
#[derive(Debug)]
pub struct AgentSession {
    ws: Workspace,
    process: SupervisedProcess,
    last: Snapshot,
    started: Instant,
    seq: u64,
    queue: VecDeque<AgentEvent>,
    blocked: Vec<Violation>,
    blocked_paths: Vec<String>,
    ended: bool,
    pub poll: Duration,
}

/// Launch `adapter` in `ws` (or a worktree of it, per `workdir_mode`).
pub fn start_session(ws: &Workspace, adapter: &AdapterConfig, instructions: &Path) -> Result<AgentSession> {
    let Some(binary) = find_binary(&adapter.binary) else {
        return Err(Error::NotFound(format!("agent binary `{}` not found", adapter.binary)));
    };
    if !instructions.is_file() {
        return Err(Error::NotFound(format!("instruction file {}", instructions.display())));
    }
    let ws = match adapter.workdir_mode {
        WorkdirMode::Workspace => ws.clone(),
        WorkdirMode::Worktree => {
            let name = binary.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let mut n = 1;
            while ws.git().branch_exists(&format!("agent/{name}-{n}")) {
                n += 1;
            }
            Workspace::open(&crate::ledger::open_worktree(ws, &format!("agent/{name}-{n}"))?)?
        }
    };
    let last = snapshot(ws.root())?;
    let policy = SandboxPolicy::for_workspace(ws.root(), &ws.manifest().sandbox);
    let stamp = SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let log = PathBuf::from(format!("logs/agent/session-{stamp}.log"));
    let opts = SpawnOptions {
        registry: Some(ws.logs_dir().join("processes")),
        ..SpawnOptions::default()
    };
    let process = supervisor::spawn_with(&policy, &adapter.command(instructions), &log, &opts)?;
    Ok(AgentSession {
        ws,
        process,
        last,
        started: Instant::now(),
        seq: 0,
        queue: VecDeque::new(),
        blocked: Vec::new(),
        blocked_paths: Vec::new(),
        ended: false,
        poll: Duration::from_millis(200),
    })
}

impl AgentSession {
    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub fn process(&self) -> &SupervisedProcess {
        &self.process
    }

    /// Violations the agent is currently paused on.
    pub fn blocked(&self) -> &[Violation] {
        &self.blocked
    }

    fn push(&mut self, kind: EventKind) -> AgentEvent {
        let e = AgentEvent {
            seq: self.seq,
            kind,
            at: self.started.elapsed(),
        };
        self.seq += 1;
        self.queue.push_back(e.clone());
        e
    }

    fn scan(&mut self) -> Result<()> {
        let now = snapshot(self.ws.root())?;
        let paths = changed_paths(&self.last, &now);
        self.last = now;
        if paths.is_empty() {
            return Ok(());
        }
        let e = self.push(EventKind::FileEdit { paths: paths.clone() });
        let blocking = guardrails::blocking(forward(&self.ws, &e)?);
        if !blocking.is_empty() {
            self.process.signal(libc::SIGSTOP);
            self.blocked = blocking;
            self.blocked_paths = paths;
        }
        Ok(())
    }

    /// Next event, waiting for one. `None` once the session has ended, or
    /// while it is paused on a violation.
    pub fn next_event(&mut self) -> Result<Option<AgentEvent>> {
        loop {
            if let Some(e) = self.queue.pop_front() {
                return Ok(Some(e));
            }
            if self.ended || !self.blocked.is_empty() {
                return Ok(None);
            }
            let state = self.process.poll()?;
            self.scan()?;
            if self.queue.is_empty() && state.is_terminal() {
                self.push(EventKind::SessionEnd);
                self.ended = true;
                continue;
            }
            if self.queue.is_empty() {
                std::thread::sleep(self.poll);
            }
        }
    }

    /// Re-run the hooks for the paths that blocked; continue the agent if
    /// they pass. Returns whether the agent is running again.
    pub fn resume(&mut self) -> Result<bool> {
        if self.blocked.is_empty() {
            return Ok(true);
        }
        self.last = snapshot(self.ws.root())?;
        let ctx = HookContext {
            touched: self.blocked_paths.clone(),
            ..HookContext::default()
        };
        let blocking = guardrails::blocking(guardrails::run_hooks(&self.ws, Trigger::FileEdit, &ctx)?);
        if blocking.is_empty() {
            self.blocked.clear();
            self.blocked_paths.clear();
            self.process.signal(libc::SIGCONT);
            Ok(true)
        } else {
            self.blocked = blocking;
            Ok(false)
        }
    }

    pub fn stop(&mut self) -> Result<ProcessState> {
        self.process.signal(libc::SIGCONT);
        self.process.kill(KillReason::Requested)
    }
}

/// Values that legitimately differ between otherwise identical runs:
/// `(pattern, replacement)`.
pub const NORMALIZATION: [(&str, &str); 4] = [
    (r"\b[0-9a-f]{40}\b", "<hash>"),
    (r#"(wall_clock_s"?\s*[:=]\s*)[0-9.eE+-]+"#, "${1}0"),
    (r"logs/agent/session-[0-9]+\.log", "logs/agent/session-<t>.log"),
    (r"\b[0-9]+\.json\b", "<pid>.json"),
];

/// Every file in the workspace with per-run values masked, plus the ledger
/// history, keyed by path. Equal maps mean equal research state.
pub fn normalized_workspace(root: &Path) -> Result<BTreeMap<String, String>> {
    let rules: Vec<(Regex, &str)> = NORMALIZATION
        .iter()
        .map(|(p, r)| (Regex::new(p).expect("static pattern"), *r))
        .collect();
    let root_str = root.to_string_lossy().into_owned();
    let norm = |s: &str| {
        let mut s = s.replace(&root_str, "<root>");
        for (re, rep) in &rules {
            s = re.replace_all(&s, *rep).into_owned();
        }
        s
    };
    let mut out = BTreeMap::new();
    let walk = walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.depth() != 1 || e.file_name() != ".git");
    for entry in walk {
        let entry = entry.map_err(|e| Error::Invalid(format!("walking {}: {e}", root.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let bytes = fs::read(entry.path()).at(entry.path())?;
        out.insert(norm(&rel.to_string_lossy()), norm(&String::from_utf8_lossy(&bytes)));
    }
    let git = crate::git::Git::new(root);
    if git.head()?.is_some() {
        let history = git.run(&["log", "--all", "--topo-order", "--format=%s%n%b%n--"])?;
        let tags = git.run(&["tag", "--list"])?;
        out.insert("<git log>".into(), norm(&history));
        out.insert("<git tags>".into(), tags);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_adapters_parse() {
        for (name, _) in AGENT_CONFIGS {
            let a = AdapterConfig::load(name).unwrap();
            assert_eq!(a.workdir_mode, WorkdirMode::Workspace);
            assert!(!a.binary.is_empty());
        }
        assert!(matches!(AdapterConfig::load("nope"), Err(Error::NotFound(_))));
    }

    #[test]
    fn adapter_command_substitutes_path() {
        let a = AdapterConfig {
            binary: "agent".into(),
            instruction_arg: "--system-file={instructions}".into(),
            workdir_mode: WorkdirMode::Workspace,
        };
        assert_eq!(a.command(Path::new("/w/INSTRUCTIONS.md")), "agent --system-file=/w/INSTRUCTIONS.md");
    }

    #[test]
    fn changed_paths_sees_add_remove_modify() {
        let a: Snapshot = [("a", "1"), ("b", "2")].iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let b: Snapshot = [("b", "3"), ("c", "4")].iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        assert_eq!(changed_paths(&a, &b), vec!["a", "b", "c"]);
        assert!(changed_paths(&a, &a).is_empty());
    }

    #[test]
    fn snapshot_skips_git_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join(".git")).unwrap();
        fs::create_dir_all(dir.path().join("logs")).unwrap();
        fs::create_dir_all(dir.path().join("src")).unwrap();
        fs::write(dir.path().join(".git/HEAD"), "x").unwrap();
        fs::write(dir.path().join("logs/a.log"), "x").unwrap();
        fs::write(dir.path().join("src/logs"), "x").unwrap();
        let s = snapshot(dir.path()).unwrap();
        assert_eq!(s.keys().collect::<Vec<_>>(), vec!["src/logs"]);
    }

    #[test]
    fn missing_binary_detected() {
        assert!(find_binary("definitely-not-an-agent-binary").is_none());
        assert!(find_binary("sh").is_some());
    }
}

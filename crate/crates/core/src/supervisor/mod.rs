//! Sandboxed subprocesses with output routed to log files.
//!
//! Commands run either inside a container (when the policy names an image) or
//! directly, after a static check of their write targets.

mod check;
mod tail;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use check::{check_writes, normalize, WriteCheck};
pub use tail::{tail, tail_from, TailStats, CHUNK};

use crate::error::{Error, IoContext, Result};
use crate::fsutil::atomic_write;
use crate::manifest::SandboxConfig;

pub const DEFAULT_POLL: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Network {
    Deny,
    AllowList(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub runtime: String,
    pub image: String,
}

/// What a supervised command may touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxPolicy {
    pub workspace: PathBuf,
    pub write_roots: Vec<PathBuf>,
    /// Subtrees of the write roots that stay read-only (the protected lockfile
    /// and unlock tokens).
    pub deny_roots: Vec<PathBuf>,
    pub network: Network,
    pub env_allow: Vec<String>,
    pub container: Option<Container>,
}

impl SandboxPolicy {
    /// Whole workspace writable except `locks/`; no network.
    pub fn for_workspace(root: &Path, cfg: &SandboxConfig) -> Self {
        let root = normalize(root);
        SandboxPolicy {
            write_roots: vec![root.clone()],
            deny_roots: vec![root.join("locks")],
            network: if cfg.network_allow.is_empty() {
                Network::Deny
            } else {
                Network::AllowList(cfg.network_allow.clone())
            },
            env_allow: cfg.env_allow.clone(),
            container: cfg.container_image.as_ref().map(|image| Container {
                runtime: cfg.runtime.clone(),
                image: image.clone(),
            }),
            workspace: root,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.workspace.is_absolute() {
            return Err(Error::Policy(format!(
                "workspace {} is not absolute",
                self.workspace.display()
            )));
        }
        for r in &self.write_roots {
            if !normalize(r).starts_with(&self.workspace) {
                return Err(Error::Policy(format!(
                    "write root {} is outside the workspace",
                    r.display()
                )));
            }
        }
        Ok(())
    }

    pub fn may_write(&self, path: &Path) -> bool {
        let p = normalize(&self.workspace.join(path));
        self.write_roots.iter().any(|r| p.starts_with(r)) && !self.deny_roots.iter().any(|r| p.starts_with(r))
    }

    /// Argument vector for running `command` in the container.
    pub fn container_argv(&self, command: &str, cwd: &Path, extra_env: &[(String, String)]) -> Option<Vec<String>> {
        let c = self.container.as_ref()?;
        let ws = self.workspace.to_string_lossy().into_owned();
        let mut argv = vec![c.runtime.clone(), "run".into(), "--rm".into(), "--network".into()];
        match &self.network {
            Network::Deny => argv.push("none".into()),
            Network::AllowList(hosts) => {
                argv.push("bridge".into());
                argv.push("--label".into());
                argv.push(format!("expharness.network-allow={}", hosts.join(",")));
            }
        }
        argv.push("-v".into());
        argv.push(format!("{ws}:{ws}"));
        for d in &self.deny_roots {
            let d = d.to_string_lossy();
            argv.push("-v".into());
            argv.push(format!("{d}:{d}:ro"));
        }
        argv.push("-w".into());
        argv.push(cwd.to_string_lossy().into_owned());
        for name in &self.env_allow {
            argv.push("-e".into());
            argv.push(name.clone());
        }
        for (k, v) in extra_env {
            argv.push("-e".into());
            argv.push(format!("{k}={v}"));
        }
        argv.push(c.image.clone());
        argv.extend(["sh".into(), "-c".into(), command.to_string()]);
        Some(argv)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KillReason {
    Policy(String),
    Timeout,
    Requested,
    Signal(i32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessState {
    Running,
    Exited(i32),
    Killed(KillReason),
}

impl ProcessState {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, ProcessState::Running)
    }
}

/// Options beyond the command and log file.
#[derive(Debug, Clone, Default)]
pub struct SpawnOptions {
    /// Working directory; defaults to the workspace root.
    pub cwd: Option<PathBuf>,
    pub env: Vec<(String, String)>,
    /// Directory for a `<pid>.json` entry while the process runs.
    pub registry: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub pid: u32,
    pub command: String,
    pub log_path: PathBuf,
    pub started_at: u64,
}

#[derive(Debug)]
pub struct SupervisedProcess {
    pid: u32,
    command: String,
    started_at: SystemTime,
    started: Instant,
    log_path: PathBuf,
    registry_entry: Option<PathBuf>,
    inner: Mutex<Inner>,
}

#[derive(Debug)]
struct Inner {
    child: Option<Child>,
    state: ProcessState,
}

fn open_log(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    OpenOptions::new().create(true).append(true).open(path).at(path)
}

/// Start `command` under `policy` with stdout and stderr appended to `log`.
pub fn spawn(policy: &SandboxPolicy, command: &str, log: &Path) -> Result<SupervisedProcess> {
    spawn_with(policy, command, log, &SpawnOptions::default())
}

pub fn spawn_with(policy: &SandboxPolicy, command: &str, log: &Path, opts: &SpawnOptions) -> Result<SupervisedProcess> {
    if command.trim().is_empty() {
        return Err(Error::Invalid("empty command".into()));
    }
    policy.validate()?;
    let log_abs = normalize(&policy.workspace.join(log));
    if !policy.may_write(&log_abs) {
        return Err(Error::Policy(format!(
            "log destination {} is not under a write root",
            log_abs.display()
        )));
    }
    let cwd = normalize(&policy.workspace.join(opts.cwd.as_deref().unwrap_or(Path::new("."))));
    if !cwd.starts_with(&policy.workspace) {
        return Err(Error::Policy(format!("working directory {} is outside the workspace", cwd.display())));
    }
    let mut file = open_log(&log_abs)?;
    writeln!(file, "$ {command}").at(&log_abs)?;

    let started_at = SystemTime::now();
    let started = Instant::now();
    let make = |pid: u32, state: ProcessState, child: Option<Child>, registry_entry| SupervisedProcess {
        pid,
        command: command.to_string(),
        started_at,
        started,
        log_path: log_abs.clone(),
        registry_entry,
        inner: Mutex::new(Inner { child, state }),
    };

    let mut cmd = match policy.container_argv(command, &cwd, &opts.env) {
        Some(argv) => {
            let mut c = Command::new(&argv[0]);
            c.args(&argv[1..]);
            c
        }
        None => {
            if let WriteCheck::Denied(reason) = check_writes(command, &cwd, &policy.write_roots, &policy.deny_roots) {
                writeln!(file, "[killed: policy: {reason}]").at(&log_abs)?;
                return Ok(make(0, ProcessState::Killed(KillReason::Policy(reason)), None, None));
            }
            let mut c = Command::new("sh");
            c.arg("-c").arg(command);
            c
        }
    };
    cmd.current_dir(&cwd).env_clear();
    for name in &policy.env_allow {
        if let Some(v) = std::env::var_os(name) {
            cmd.env(name, v);
        }
    }
    for (k, v) in &opts.env {
        cmd.env(k, v);
    }
    let out = file.try_clone().at(&log_abs)?;
    cmd.stdin(Stdio::null())
        .stdout(Stdio::from(out))
        .stderr(Stdio::from(file))
        .process_group(0);
    let child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => {
            let _ = crate::fsutil::append_line(&log_abs, &format!("[spawn failed: {e}]"));
            return Err(Error::Invalid(format!("cannot start `{command}`: {e}")));
        }
    };
    let pid = child.id();
    let registry_entry = match &opts.registry {
        Some(dir) => {
            let path = dir.join(format!("{pid}.json"));
            let entry = RegistryEntry {
                pid,
                command: command.to_string(),
                log_path: log_abs.clone(),
                started_at: started_at.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            };
            atomic_write(&path, serde_json::to_string(&entry).expect("serializes").as_bytes())?;
            Some(path)
        }
        None => None,
    };
    Ok(make(pid, ProcessState::Running, Some(child), registry_entry))
}

impl SupervisedProcess {
    /// Process id; 0 when the command was refused before starting.
    pub fn pid(&self) -> u32 {
        self.pid
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn started_at(&self) -> SystemTime {
        self.started_at
    }

    pub fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn state(&self) -> ProcessState {
        self.inner.lock().expect("process lock").state.clone()
    }

    fn finish(&self, inner: &mut Inner, state: ProcessState) {
        let footer = match &state {
            ProcessState::Exited(code) => format!("[exit {code}]"),
            ProcessState::Killed(KillReason::Timeout) => "[killed: timeout]".to_string(),
            ProcessState::Killed(KillReason::Requested) => "[killed: requested]".to_string(),
            ProcessState::Killed(KillReason::Signal(s)) => format!("[killed: signal {s}]"),
            ProcessState::Killed(KillReason::Policy(r)) => format!("[killed: policy: {r}]"),
            ProcessState::Running => return,
        };
        let _ = crate::fsutil::append_line(&self.log_path, &footer);
        if let Some(p) = &self.registry_entry {
            let _ = fs::remove_file(p);
        }
        inner.child = None;
        inner.state = state;
    }

    /// Non-blocking status check.
    pub fn poll(&self) -> Result<ProcessState> {
        let mut inner = self.inner.lock().expect("process lock");
        if let Some(child) = inner.child.as_mut() {
            let status = child.try_wait().at(&self.log_path)?;
            if let Some(status) = status {
                let state = match (status.code(), status.signal()) {
                    (Some(code), _) => ProcessState::Exited(code),
                    (None, Some(sig)) => ProcessState::Killed(KillReason::Signal(sig)),
                    (None, None) => ProcessState::Exited(-1),
                };
                self.finish(&mut inner, state);
            }
        }
        Ok(inner.state.clone())
    }

    /// Kill the whole process group.
    pub fn kill(&self, reason: KillReason) -> Result<ProcessState> {
        let mut inner = self.inner.lock().expect("process lock");
        if let Some(mut child) = inner.child.take() {
            // SAFETY: plain syscall on a process group we created.
            unsafe {
                libc::killpg(self.pid as libc::pid_t, libc::SIGKILL);
            }
            let _ = child.wait();
            self.finish(&mut inner, ProcessState::Killed(reason));
        }
        Ok(inner.state.clone())
    }

    /// Send a signal to the process group without changing the recorded state
    /// (used to pause and resume agents).
    pub fn signal(&self, sig: i32) {
        if self.inner.lock().expect("process lock").child.is_some() {
            // SAFETY: as in `kill`.
            unsafe {
                libc::killpg(self.pid as libc::pid_t, sig);
            }
        }
    }

    /// Block until the process ends or `timeout` passes; on timeout the
    /// process group is killed.
    pub fn wait_timeout(&self, timeout: Option<Duration>, poll: Duration) -> Result<ProcessState> {
        loop {
            let state = self.poll()?;
            if state.is_terminal() {
                return Ok(state);
            }
            if timeout.is_some_and(|t| self.started.elapsed() >= t) {
                return self.kill(KillReason::Timeout);
            }
            std::thread::sleep(poll);
        }
    }

    pub fn wait(&self) -> Result<ProcessState> {
        self.wait_timeout(None, Duration::from_millis(10))
    }
}

impl Drop for SupervisedProcess {
    fn drop(&mut self) {
        if let Ok(inner) = self.inner.get_mut() {
            if let Some(child) = inner.child.as_mut() {
                if matches!(child.try_wait(), Ok(None)) {
                    return;
                }
            }
        }
        if let Some(p) = &self.registry_entry {
            let _ = fs::remove_file(p);
        }
    }
}

/// Wait, producing no output, until one of `processes` is terminal. Returns
/// its index. Idle time is added to the counter file when one is given.
pub fn wait_idle(processes: &[&SupervisedProcess], poll: Duration, idle_file: Option<&Path>) -> Result<usize> {
    if processes.is_empty() {
        return Err(Error::Invalid("wait_idle needs at least one process".into()));
    }
    let start = Instant::now();
    let found = loop {
        let mut found = None;
        for (i, p) in processes.iter().enumerate() {
            if p.poll()?.is_terminal() {
                found = Some(i);
                break;
            }
        }
        if let Some(i) = found {
            break i;
        }
        std::thread::sleep(poll);
    };
    if let Some(path) = idle_file {
        add_idle(path, start.elapsed())?;
    }
    Ok(found)
}

pub fn read_idle(path: &Path) -> f64 {
    fs::read_to_string(path)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0.0)
}

fn add_idle(path: &Path, d: Duration) -> Result<()> {
    let total = read_idle(path) + d.as_secs_f64();
    atomic_write(path, format!("{total:.3}\n").as_bytes())
}

/// Registry entries whose process is still alive.
pub fn running_processes(registry: &Path) -> Vec<RegistryEntry> {
    let Ok(dir) = fs::read_dir(registry) else {
        return Vec::new();
    };
    let mut out: Vec<RegistryEntry> = dir
        .filter_map(|e| e.ok())
        .filter_map(|e| fs::read_to_string(e.path()).ok())
        .filter_map(|t| serde_json::from_str::<RegistryEntry>(&t).ok())
        .filter(|e| {
            // SAFETY: signal 0 only checks for existence.
            unsafe { libc::kill(e.pid as libc::pid_t, 0) == 0 }
        })
        .collect();
    out.sort_by_key(|e| e.pid);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(dir: &Path) -> SandboxPolicy {
        SandboxPolicy::for_workspace(&dir.canonicalize().unwrap(), &SandboxConfig::default())
    }

    #[test]
    fn echo_is_logged() {
        let dir = tempfile::tempdir().unwrap();
        let p = policy(dir.path());
        let proc = spawn(&p, "echo hello", Path::new("logs/echo.log")).unwrap();
        assert_eq!(proc.wait().unwrap(), ProcessState::Exited(0));
        let log = fs::read_to_string(dir.path().join("logs/echo.log")).unwrap();
        assert_eq!(log, "$ echo hello\nhello\n[exit 0]\n");
    }

    #[test]
    fn outside_write_is_killed_without_running() {
        let dir = tempfile::tempdir().unwrap();
        let outside = tempfile::tempdir().unwrap();
        let target = outside.path().join("escaped");
        let p = policy(dir.path());
        let cmd = format!("echo x > {}", target.display());
        let proc = spawn(&p, &cmd, Path::new("logs/x.log")).unwrap();
        assert!(matches!(proc.state(), ProcessState::Killed(KillReason::Policy(_))));
        assert!(!target.exists());
        assert!(dir.path().join("logs/x.log").exists());
    }

    #[test]
    fn log_outside_workspace_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = policy(dir.path());
        assert!(spawn(&p, "true", Path::new("/tmp/x.log")).is_err());
        assert!(spawn(&p, "true", Path::new("locks/x.log")).is_err());
        assert!(spawn(&p, "  ", Path::new("logs/x.log")).is_err());
    }

    #[test]
    fn env_is_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let p = policy(dir.path());
        let opts = SpawnOptions {
            env: vec![("EXTRA".into(), "1".into())],
            ..Default::default()
        };
        std::env::set_var("EXH_SECRET_TEST", "leak");
        let proc = spawn_with(&p, "echo ${EXH_SECRET_TEST:-none} $EXTRA", Path::new("logs/env.log"), &opts).unwrap();
        proc.wait().unwrap();
        let log = fs::read_to_string(dir.path().join("logs/env.log")).unwrap();
        assert!(log.contains("none 1"), "{log}");
    }

    #[test]
    fn timeout_kills_group() {
        let dir = tempfile::tempdir().unwrap();
        let p = policy(dir.path());
        let proc = spawn(&p, "sleep 5; echo late", Path::new("logs/t.log")).unwrap();
        let state = proc
            .wait_timeout(Some(Duration::from_millis(200)), Duration::from_millis(20))
            .unwrap();
        assert_eq!(state, ProcessState::Killed(KillReason::Timeout));
        let log = fs::read_to_string(dir.path().join("logs/t.log")).unwrap();
        assert!(!log.lines().any(|l| l == "late"), "{log}");
    }

    #[test]
    fn wait_idle_first_wins() {
        let dir = tempfile::tempdir().unwrap();
        let p = policy(dir.path());
        let slow = spawn(&p, "sleep 2", Path::new("logs/slow.log")).unwrap();
        let fast = spawn(&p, "sleep 0.2", Path::new("logs/fast.log")).unwrap();
        let idle = dir.path().join("logs/idle");
        let i = wait_idle(&[&slow, &fast], Duration::from_millis(50), Some(&idle)).unwrap();
        assert_eq!(i, 1);
        assert!(read_idle(&idle) > 0.1);
        assert!(wait_idle(&[], Duration::from_millis(50), None).is_err());
        slow.kill(KillReason::Requested).unwrap();
    }

    #[test]
    fn container_argv_contract() {
        let cfg = SandboxConfig {
            container_image: Some("research:latest".into()),
            env_allow: vec!["PATH".into()],
            ..SandboxConfig::default()
        };
        let p = SandboxPolicy::for_workspace(Path::new("/ws"), &cfg);
        let argv = p.container_argv("make", Path::new("/ws/src"), &[]).unwrap();
        assert_eq!(
            argv,
            [
                "docker", "run", "--rm", "--network", "none", "-v", "/ws:/ws", "-v",
                "/ws/locks:/ws/locks:ro", "-w", "/ws/src", "-e", "PATH", "research:latest", "sh",
                "-c", "make"
            ]
        );
    }
}

//! Remote dispatch of independent, snapshot-pinned jobs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use super::{JobSpec, Node, NodeState};
use crate::error::{Error, IoContext, Result};
use crate::fsutil::{append_line, shell_quote as sh_quote};
use crate::ledger::ExperimentId;

/// Parse one wire block produced by [`JobSpec::to_wire`].
pub fn parse_wire(text: &str) -> Result<JobSpec> {
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    let mut terminated = false;
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            terminated = true;
            break;
        }
        let (k, v) = line
            .split_once(": ")
            .or_else(|| line.strip_suffix(':').map(|k| (k, "")))
            .ok_or_else(|| Error::Invalid(format!("job line {}: expected `key: value`", i + 1)))?;
        if !["id", "snapshot", "cmd", "gpus", "image", "depends"].contains(&k) {
            return Err(Error::Invalid(format!("job line {}: unknown key `{k}`", i + 1)));
        }
        if fields.insert(k, v).is_some() {
            return Err(Error::Invalid(format!("job line {}: duplicate key `{k}`", i + 1)));
        }
    }
    if !terminated {
        return Err(Error::Invalid("job block is not terminated by a blank line".into()));
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Invalid(format!("job block lacks `{k}`")));
    let id = get("id")?.parse().map_err(|e| Error::Invalid(format!("job id: {e}")))?;
    let gpus = get("gpus")?
        .parse()
        .map_err(|_| Error::Invalid("job gpus must be a positive integer".into()))?;
    let depends = get("depends")?;
    let depends_on = if depends.is_empty() {
        Vec::new()
    } else {
        depends
            .split(',')
            .map(|d| d.trim().parse().map_err(|e| Error::Invalid(format!("job depends: {e}"))))
            .collect::<Result<_>>()?
    };
    let image = get("image")?;
    let job = JobSpec {
        id,
        snapshot: get("snapshot")?.to_string(),
        command: get("cmd")?.to_string(),
        gpus,
        depends_on,
        image: (!image.is_empty()).then(|| image.to_string()),
    };
    job.validate()?;
    Ok(job)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemoteStatus {
    Pending,
    Running,
    Exited(i32),
}

/// How a job reaches a node. An `Err` from any method means the connection
/// to the job was lost.
pub trait Transport {
    /// Make the snapshot commit available on the node.
    fn materialize(&mut self, node: &str, job: &JobSpec) -> Result<()>;
    /// Start the job's container; output goes to `log`.
    fn start(&mut self, node: &str, job: &JobSpec, log: &Path) -> Result<()>;
    fn status(&mut self, node: &str, id: ExperimentId) -> Result<RemoteStatus>;
    /// Copy result files into `dest`.
    fn fetch(&mut self, node: &str, id: ExperimentId, dest: &Path) -> Result<Vec<PathBuf>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleStatus {
    Pending,
    Running,
    Done(i32),
    Lost,
}

impl HandleStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, HandleStatus::Done(_) | HandleStatus::Lost)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchHandle {
    pub job: JobSpec,
    pub node: String,
    pub status: HandleStatus,
    pub log_path: PathBuf,
}

/// Owns the remote queue. Lost jobs are re-queued once, then reported as
/// failed.
#[derive(Debug)]
pub struct Dispatcher<T: Transport> {
    pub transport: T,
    logs: PathBuf,
    /// Experiments with recorded tier-3 results.
    pub completed: BTreeSet<ExperimentId>,
    pub queue: Vec<JobSpec>,
    pub failed: Vec<ExperimentId>,
    requeued: BTreeSet<ExperimentId>,
    /// Every job handed to the transport, in order.
    pub trace: Vec<(ExperimentId, String)>,
}

impl<T: Transport> Dispatcher<T> {
    pub fn new(transport: T, logs: impl Into<PathBuf>, completed: BTreeSet<ExperimentId>) -> Self {
        Dispatcher {
            transport,
            logs: logs.into(),
            completed,
            queue: Vec::new(),
            failed: Vec::new(),
            requeued: BTreeSet::new(),
            trace: Vec::new(),
        }
    }

    fn lose(&mut self, job: JobSpec) {
        if self.requeued.insert(job.id) {
            self.queue.push(job);
        } else {
            self.failed.push(job.id);
        }
    }

    /// Send `job` to `node`. Jobs with incomplete dependencies are refused.
    pub fn remote_run(&mut self, job: JobSpec, node: &Node) -> Result<DispatchHandle> {
        job.validate()?;
        let pending = job.pending_dependencies(&self.completed);
        if !pending.is_empty() {
            let names: Vec<String> = pending.iter().map(|p| p.to_string()).collect();
            return Err(Error::Policy(format!(
                "{} depends on {} which has no tier-3 result; never dispatch dependent work (Commandment C4)",
                job.id,
                names.join(", ")
            )));
        }
        if node.state != NodeState::Up {
            return Err(Error::Invalid(format!("node {} is {}", node.hostname, node.state)));
        }
        if node.gpus < job.gpus {
            return Err(Error::Invalid(format!(
                "node {} has {} GPU(s); {} needs {}",
                node.hostname, node.gpus, job.id, job.gpus
            )));
        }
        let log = self.logs.join(job.id.to_string()).join(format!("remote-{}.log", node.hostname));
        for line in job.to_wire().lines().filter(|l| !l.is_empty()) {
            append_line(&log, &format!("# {line}"))?;
        }
        self.trace.push((job.id, node.hostname.clone()));
        let started = self
            .transport
            .materialize(&node.hostname, &job)
            .and_then(|_| self.transport.start(&node.hostname, &job, &log));
        let status = match started {
            Ok(()) => HandleStatus::Running,
            Err(e) => {
                append_line(&log, &format!("[lost: {e}]"))?;
                self.lose(job.clone());
                HandleStatus::Lost
            }
        };
        Ok(DispatchHandle {
            job,
            node: node.hostname.clone(),
            status,
            log_path: log,
        })
    }

    /// Refresh a handle's status.
    pub fn poll(&mut self, h: &mut DispatchHandle) -> Result<HandleStatus> {
        if h.status.is_terminal() {
            return Ok(h.status);
        }
        h.status = match self.transport.status(&h.node, h.job.id) {
            Ok(RemoteStatus::Pending) => HandleStatus::Pending,
            Ok(RemoteStatus::Running) => HandleStatus::Running,
            Ok(RemoteStatus::Exited(c)) => {
                append_line(&h.log_path, &format!("[exit {c}]"))?;
                HandleStatus::Done(c)
            }
            Err(e) => {
                append_line(&h.log_path, &format!("[lost: {e}]"))?;
                self.lose(h.job.clone());
                HandleStatus::Lost
            }
        };
        Ok(h.status)
    }

    pub fn fetch(&mut self, h: &DispatchHandle, dest: &Path) -> Result<Vec<PathBuf>> {
        match h.status {
            HandleStatus::Done(_) => self.transport.fetch(&h.node, h.job.id, dest),
            _ => Err(Error::Invalid(format!("{} has not finished", h.job.id))),
        }
    }

    /// Mark an experiment's tier-3 result as recorded.
    pub fn mark_complete(&mut self, id: ExperimentId) {
        self.completed.insert(id);
    }

    /// Remove and return the first queued job whose dependencies are done.
    pub fn next_ready(&mut self) -> Option<JobSpec> {
        let i = self.queue.iter().position(|j| j.is_ready(&self.completed))?;
        Some(self.queue.remove(i))
    }
}

/// Injected failure for [`FakeTransport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Connection fails while starting.
    AtStart,
    /// Connection drops on the n-th status poll.
    AfterPolls(u32),
}

/// In-process transport for tests and simulation. Each fault fires once.
#[derive(Debug, Default)]
pub struct FakeTransport {
    /// Status polls a job stays running before it exits.
    pub run_polls: u32,
    pub exit_code: i32,
    pub faults: BTreeMap<ExperimentId, Fault>,
    jobs: BTreeMap<ExperimentId, (u32, PathBuf)>,
    pub started: Vec<(String, JobSpec)>,
}

impl FakeTransport {
    pub fn new(run_polls: u32) -> Self {
        FakeTransport {
            run_polls,
            ..FakeTransport::default()
        }
    }
}

impl Transport for FakeTransport {
    fn materialize(&mut self, _node: &str, _job: &JobSpec) -> Result<()> {
        Ok(())
    }

    fn start(&mut self, node: &str, job: &JobSpec, log: &Path) -> Result<()> {
        if self.faults.get(&job.id) == Some(&Fault::AtStart) {
            self.faults.remove(&job.id);
            return Err(Error::Transport(format!("connection to {node} refused")));
        }
        append_line(log, &format!("[{node}] checkout {} and run `{}`", job.snapshot, job.command))?;
        self.jobs.insert(job.id, (0, log.to_path_buf()));
        self.started.push((node.to_string(), job.clone()));
        Ok(())
    }

    fn status(&mut self, node: &str, id: ExperimentId) -> Result<RemoteStatus> {
        let (polls, log) = self
            .jobs
            .get_mut(&id)
            .ok_or_else(|| Error::Transport(format!("{id} unknown on {node}")))?;
        *polls += 1;
        if let Some(Fault::AfterPolls(n)) = self.faults.get(&id) {
            if *polls >= *n {
                self.faults.remove(&id);
                self.jobs.remove(&id);
                return Err(Error::Transport(format!("connection to {node} dropped")));
            }
        }
        if *polls > self.run_polls {
            Ok(RemoteStatus::Exited(self.exit_code))
        } else {
            append_line(log, &format!("[{node}] step {polls}"))?;
            Ok(RemoteStatus::Running)
        }
    }

    fn fetch(&mut self, _node: &str, id: ExperimentId, dest: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dest).at(dest)?;
        let p = dest.join("result.txt");
        fs::write(&p, format!("{id} done\n")).at(&p)?;
        Ok(vec![p])
    }
}

/// Remote-shell transport. The snapshot is fetched on the node from
/// `origin` (a path on a shared filesystem or a git URL) and the command runs
/// in the job's container.
#[derive(Debug)]
pub struct SshTransport {
    pub ssh: String,
    pub origin: String,
    pub remote_root: String,
    pub runtime: String,
    procs: BTreeMap<ExperimentId, Child>,
}

impl SshTransport {
    pub fn new(origin: impl Into<String>, remote_root: impl Into<String>, runtime: impl Into<String>) -> Self {
        SshTransport {
            ssh: "ssh".into(),
            origin: origin.into(),
            remote_root: remote_root.into(),
            runtime: runtime.into(),
            procs: BTreeMap::new(),
        }
    }

    fn job_dir(&self, id: ExperimentId) -> String {
        format!("{}/{id}", self.remote_root.trim_end_matches('/'))
    }

    fn argv(&self, node: &str, script: String) -> Vec<String> {
        vec![self.ssh.clone(), "-o".into(), "BatchMode=yes".into(), node.to_string(), script]
    }

    pub fn materialize_argv(&self, node: &str, job: &JobSpec) -> Vec<String> {
        let dir = sh_quote(&self.job_dir(job.id));
        let script = format!(
            "mkdir -p {dir} && cd {dir} && git init -q && git fetch -q {} {} && git checkout -q --detach {}",
            sh_quote(&self.origin),
            job.snapshot,
            job.snapshot
        );
        self.argv(node, script)
    }

    pub fn start_argv(&self, node: &str, job: &JobSpec) -> Vec<String> {
        let dir = self.job_dir(job.id);
        let inner = match &job.image {
            Some(image) => format!(
                "{} run --rm --gpus {} -v {d}:{d} -w {d} {} sh -c {}",
                self.runtime,
                job.gpus,
                sh_quote(image),
                sh_quote(&job.command),
                d = sh_quote(&dir)
            ),
            None => format!("sh -c {}", sh_quote(&job.command)),
        };
        self.argv(node, format!("cd {} && {inner}", sh_quote(&dir)))
    }

    pub fn fetch_argv(&self, node: &str, id: ExperimentId, dest: &Path) -> Vec<String> {
        vec![
            "scp".into(),
            "-r".into(),
            "-o".into(),
            "BatchMode=yes".into(),
            format!("{node}:{}/results", self.job_dir(id)),
            dest.to_string_lossy().into_owned(),
        ]
    }
}

fn run(argv: &[String]) -> Result<()> {
    let out = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::null())
        .output()
        .map_err(|e| Error::Transport(format!("{}: {e}", argv[0])))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(Error::Transport(String::from_utf8_lossy(&out.stderr).trim().to_string()))
    }
}

impl Transport for SshTransport {
    fn materialize(&mut self, node: &str, job: &JobSpec) -> Result<()> {
        run(&self.materialize_argv(node, job))
    }

    fn start(&mut self, node: &str, job: &JobSpec, log: &Path) -> Result<()> {
        let argv = self.start_argv(node, job);
        let file = OpenOptions::new().create(true).append(true).open(log).at(log)?;
        let err = file.try_clone().at(log)?;
        let child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::null())
            .stdout(file)
            .stderr(err)
            .spawn()
            .map_err(|e| Error::Transport(format!("{}: {e}", argv[0])))?;
        self.procs.insert(job.id, child);
        Ok(())
    }

    fn status(&mut self, node: &str, id: ExperimentId) -> Result<RemoteStatus> {
        let child = self
            .procs
            .get_mut(&id)
            .ok_or_else(|| Error::Transport(format!("{id} was not started on {node}")))?;
        match child.try_wait() {
            Ok(None) => Ok(RemoteStatus::Running),
            // ssh reports connection failures as 255.
            Ok(Some(s)) if s.code() == Some(255) || s.code().is_none() => {
                self.procs.remove(&id);
                Err(Error::Transport(format!("connection to {node} lost")))
            }
            Ok(Some(s)) => Ok(RemoteStatus::Exited(s.code().unwrap_or(-1))),
            Err(e) => Err(Error::Transport(e.to_string())),
        }
    }

    fn fetch(&mut self, node: &str, id: ExperimentId, dest: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dest).at(dest)?;
        run(&self.fetch_argv(node, id, dest))?;
        Ok(walkdir::WalkDir::new(dest)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .collect())
    }
}

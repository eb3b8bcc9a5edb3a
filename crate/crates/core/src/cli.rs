//! The `exh` command tree. Exit codes: 0 success, 1 blocking violations,
//! 2 usage or configuration errors.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::agent::{self, AdapterConfig, AgentScript, EventKind, FakeSession, Halt};
use crate::assets::Domain;
use crate::error::{Error, IoContext, Result};
use crate::evaluation::{self, TierSpec, TierStatus};
use crate::fsutil::atomic_write;
use crate::guardrails::{self, HookContext, Severity, Trigger, UnlockToken, Violation, UNLOCK_DIR};
use crate::ledger::{self, Direction, ExperimentId, ExperimentRecord, Filter};
use crate::manifest::ProjectManifest;
use crate::report::{
    self, append_section, grade_claim, parse_report, Claim, Evidence, EvidenceStatus, ExperimentSection,
    Grade, ReportDocument, ResultRef, TodoEdit, TodoKind, TodoList, TodoState, REGION_BEGIN, REGION_END,
};
use crate::scheduler::{self, Dispatcher, HandleStatus, JobSpec, NodeInventory, NodeState, SshTransport};
use crate::supervisor::{self, ProcessState, SandboxPolicy, SpawnOptions};
use crate::workspace::{self, bootstrap_session, InitOptions, Workspace};

/// Idle-time counter, in seconds, kept across sessions.
pub const IDLE_FILE: &str = "logs/idle";

#[derive(Debug, Parser)]
#[command(name = "exh", version, about = "Research workspace harness for CLI coding agents")]
pub struct Cli {
    /// Stable `key=value` output for scripts and agents.
    #[arg(long, global = true)]
    pub porcelain: bool,
    /// Run as if started in this directory.
    #[arg(short = 'C', global = true, value_name = "DIR")]
    pub chdir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DomainArg {
    Compute,
    Math,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum TriggerArg {
    FileEdit,
    ExperimentRun,
    PreCommit,
    SessionStart,
}

impl From<TriggerArg> for Trigger {
    fn from(t: TriggerArg) -> Trigger {
        match t {
            TriggerArg::FileEdit => Trigger::FileEdit,
            TriggerArg::ExperimentRun => Trigger::ExperimentRun,
            TriggerArg::PreCommit => Trigger::PreCommit,
            TriggerArg::SessionStart => Trigger::SessionStart,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a workspace in an empty directory.
    Init {
        dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "compute")]
        domain: DomainArg,
        /// Copy this directory's files in before protected paths are locked.
        #[arg(long)]
        import: Option<PathBuf>,
    },
    /// Summary of experiments, processes, GPUs and pending violations.
    Status,
    #[command(subcommand)]
    Exp(ExpCommand),
    #[command(subcommand)]
    Report(ReportCommand),
    #[command(subcommand)]
    Todo(TodoCommand),
    #[command(subcommand)]
    Guard(GuardCommand),
    #[command(subcommand)]
    Tier(TierCommand),
    /// Send an experiment to a remote node.
    Dispatch(DispatchArgs),
    /// Nodes of the current allocation.
    Nodes {
        /// Expand this nodelist instead of reading the environment.
        #[arg(long)]
        nodelist: Option<String>,
    },
    /// Probe local GPUs.
    Gpus,
    #[command(subcommand)]
    Session(SessionCommand),
    #[command(subcommand)]
    Instructions(InstructionsCommand),
    #[command(subcommand)]
    Cite(CiteCommand),
    /// Authorize one change to a protected path (run by the researcher).
    Unlock {
        path: String,
        #[arg(long)]
        reason: String,
    },
    #[command(subcommand)]
    Worktree(WorktreeCommand),
    /// Run a command under the sandbox and wait for it.
    Run {
        command: String,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Seconds before the process group is killed.
        #[arg(long)]
        timeout: Option<u64>,
    },
    /// Last lines of a file.
    Tail {
        path: PathBuf,
        #[arg(short = 'n', default_value_t = 20)]
        lines: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExpCommand {
    /// Reserve an ID and open a plan.
    Begin {
        description: String,
        #[arg(long)]
        parent: Option<ExperimentId>,
        /// Same configuration as the parent, new seed.
        #[arg(long)]
        replicate: bool,
    },
    /// Append the experiment's report section.
    Record(RecordArgs),
    /// Create the ledger commit.
    Commit {
        id: Option<ExperimentId>,
        #[arg(long = "tag")]
        tags: Vec<String>,
    },
    List {
        #[arg(long)]
        branch: Option<String>,
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        tag: Option<String>,
        /// Inclusive range `E001..E010`.
        #[arg(long)]
        ids: Option<String>,
    },
    Best {
        metric: String,
        #[arg(long, default_value = "min")]
        direction: String,
    },
}

#[derive(Debug, Args)]
pub struct RecordArgs {
    /// Defaults to the open experiment.
    pub id: Option<ExperimentId>,
    #[arg(long)]
    pub title: String,
    #[arg(long)]
    pub goal: String,
    #[arg(long)]
    pub hypothesis: String,
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub implementation: String,
    #[arg(long)]
    pub results: String,
    #[arg(long)]
    pub analysis: String,
    #[arg(long)]
    pub next_steps: String,
    /// A claim, recorded as unverified.
    #[arg(long = "claim")]
    pub claims: Vec<String>,
    /// `tier:metric=value`, e.g. `3:val_loss=3.28`.
    #[arg(long = "result")]
    pub results_refs: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum ReportCommand {
    /// Check report.tex and TODO.md.
    Validate {
        /// Also require a section for every committed experiment and a
        /// commit for every section but the open one.
        #[arg(long)]
        strict: bool,
    },
    /// Append sections from a file of `\subsection{EXXX: ...}` blocks.
    Append { file: PathBuf },
    /// Change a claim's grade. `--evidence` runs the script first.
    Grade {
        id: ExperimentId,
        claim: usize,
        grade: String,
        #[arg(long)]
        evidence: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TodoCommand {
    Add {
        text: String,
        #[arg(long, default_value = "other")]
        kind: String,
    },
    Check { text: String },
    Uncheck { text: String },
    List {
        #[arg(long)]
        all: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum GuardCommand {
    /// Run the hooks registered for a trigger.
    Run {
        #[arg(long, value_enum)]
        trigger: TriggerArg,
        #[arg(long)]
        experiment: Option<ExperimentId>,
        #[arg(long = "touched")]
        touched: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TierCommand {
    Run {
        tier: u8,
        #[arg(long)]
        experiment: Option<ExperimentId>,
    },
}

#[derive(Debug, Args)]
pub struct DispatchArgs {
    pub id: ExperimentId,
    #[arg(long)]
    pub node: String,
    /// Defaults to the tier-3 command.
    #[arg(long)]
    pub command: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub gpus: u32,
    #[arg(long)]
    pub image: Option<String>,
    #[arg(long = "depends", value_delimiter = ',')]
    pub depends: Vec<ExperimentId>,
    /// Wait for completion and fetch results into logs/<id>/remote.
    #[arg(long)]
    pub wait: bool,
}

#[derive(Debug, Subcommand)]
pub enum SessionCommand {
    /// Launch an agent. `fake` replays `--script`.
    Start {
        #[arg(long)]
        agent: String,
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Rebuild and print the session state.
    Resume,
}

#[derive(Debug, Subcommand)]
pub enum InstructionsCommand {
    /// Write the project-specific section from a file (`-` for stdin).
    Fill {
        file: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum CiteCommand {
    List,
    /// Record that an entry was checked at its source.
    Verify {
        key: String,
        #[arg(long)]
        url: String,
        #[arg(long)]
        title: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum WorktreeCommand {
    Open { branch: String },
}

struct Out<'a> {
    w: &'a mut dyn Write,
    porcelain: bool,
}

impl Out<'_> {
    fn field(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = if self.porcelain {
            writeln!(self.w, "{key}={value}")
        } else {
            writeln!(self.w, "{key}: {value}")
        };
    }

    /// Human-only line.
    fn text(&mut self, s: impl std::fmt::Display) {
        if !self.porcelain {
            let _ = writeln!(self.w, "{s}");
        }
    }

    fn violations(&mut self, vs: &[Violation]) {
        for v in vs {
            let _ = if self.porcelain {
                writeln!(self.w, "violation={v}")
            } else {
                writeln!(self.w, "  {v}")
            };
        }
    }
}

/// Exit code for an error that escaped a command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Violations(vs) if vs.iter().any(|v| v.severity == Severity::Block) => 1,
        Error::Report(_) | Error::Policy(_) => 1,
        _ => 2,
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    let mut o = Out {
        w: out,
        porcelain: cli.porcelain,
    };
    match dispatch(&cli, &mut o) {
        Ok(code) => code,
        Err(e) => {
            match &e {
                Error::Violations(vs) => {
                    o.text("blocked:");
                    o.violations(vs);
                }
                other => {
                    let _ = writeln!(err, "exh: {other}");
                }
            }
            exit_code(&e)
        }
    }
}

fn start_dir(cli: &Cli) -> Result<PathBuf> {
    match &cli.chdir {
        Some(d) => Ok(d.clone()),
        None => std::env::current_dir().map_err(|e| Error::io(".", e)),
    }
}

fn open_ws(cli: &Cli) -> Result<Workspace> {
    Workspace::discover(&start_dir(cli)?)
}

/// The experiment a command is about: the one given, or the newest open plan.
fn current_experiment(ws: &Workspace, id: Option<ExperimentId>) -> Result<ExperimentId> {
    if let Some(id) = id {
        return Ok(id);
    }
    ledger::open_plans(ws)?
        .last()
        .map(|p| p.id)
        .ok_or_else(|| Error::NotFound("no open experiment; run `exh exp begin` first".into()))
}

/// Apply an edit to workspace files, then run the `file_edit` hooks exactly
/// as for an agent edit. A blocking result restores the previous contents.
fn guarded_edit<T>(ws: &Workspace, paths: &[&str], lock: bool, edit: impl FnOnce() -> Result<T>) -> Result<T> {
    let _lock = if lock { Some(ws.lock()?) } else { None };
    let before: Vec<Option<Vec<u8>>> = paths.iter().map(|p| fs::read(ws.root().join(p)).ok()).collect();
    let value = edit()?;
    let ctx = HookContext {
        touched: paths.iter().map(|p| p.to_string()).collect(),
        ..HookContext::default()
    };
    let blocking = guardrails::blocking(guardrails::run_hooks(ws, Trigger::FileEdit, &ctx)?);
    if !blocking.is_empty() {
        for (p, old) in paths.iter().zip(before) {
            let abs = ws.root().join(p);
            match old {
                Some(bytes) => atomic_write(&abs, &bytes)?,
                None => {
                    let _ = fs::remove_file(&abs);
                }
            }
        }
        return Err(Error::Violations(blocking));
    }
    Ok(value)
}

fn metrics_text(r: &ExperimentRecord) -> String {
    r.metrics.iter().map(|m| format!("{}={}", m.name, m.value)).collect::<Vec<_>>().join(", ")
}

fn print_record(o: &mut Out, r: &ExperimentRecord) {
    let tags = if r.tags.is_empty() {
        String::new()
    } else {
        format!(" [{}]", r.tags.join(" "))
    };
    o.field(
        "experiment",
        format!("{}\t{}\t{}\t{}{tags}", r.id, r.branch, metrics_text(r), r.description),
    );
}

fn dispatch(cli: &Cli, o: &mut Out) -> Result<i32> {
    match &cli.command {
        Command::Init {
            dir,
            manifest,
            domain,
            import,
        } => {
            let m = ProjectManifest::load(manifest)?;
            let domain = match domain {
                DomainArg::Compute => Domain::Compute,
                DomainArg::Math => Domain::Math,
            };
            let target = if dir.is_absolute() { dir.clone() } else { start_dir(cli)?.join(dir) };
            let root = workspace::init_workspace_with(&target, &m, domain, &InitOptions { import: import.clone() })?;
            o.field("workspace", root.display());
            o.text("next: fill the project section with `exh instructions fill <file>`");
            Ok(0)
        }
        Command::Status => status(&open_ws(cli)?, o),
        Command::Exp(c) => exp(&open_ws(cli)?, c, o),
        Command::Report(c) => report_cmd(&open_ws(cli)?, c, o),
        Command::Todo(c) => todo(&open_ws(cli)?, c, o),
        Command::Guard(GuardCommand::Run {
            trigger,
            experiment,
            touched,
        }) => {
            let ws = open_ws(cli)?;
            let ctx = HookContext {
                touched: touched.clone(),
                experiment: *experiment,
                ..HookContext::default()
            };
            let found = guardrails::run_hooks(&ws, (*trigger).into(), &ctx)?;
            let blocking = found.iter().filter(|v| v.severity == Severity::Block).count();
            o.field("violations", found.len());
            o.violations(&found);
            Ok(if blocking > 0 { 1 } else { 0 })
        }
        Command::Tier(TierCommand::Run { tier, experiment }) => {
            let ws = open_ws(cli)?;
            let id = current_experiment(&ws, *experiment)?;
            let spec = TierSpec::from_manifest(ws.manifest(), *tier)?;
            let r = evaluation::run_tier(&ws, id, &spec)?;
            o.field("experiment", id);
            o.field("tier", r.tier);
            o.field("status", r.status.as_str());
            for (k, v) in &r.metrics {
                o.field("metric", format!("{k}={v}"));
            }
            o.field("log", &r.log_path);
            o.field("wall_clock_s", format!("{:.3}", r.wall_clock_s));
            Ok(0)
        }
        Command::Dispatch(a) => dispatch_remote(&open_ws(cli)?, a, o),
        Command::Nodes { nodelist } => {
            let gpus = Workspace::discover(&start_dir(cli)?)
                .map(|ws| ws.manifest().cluster.gpus_per_node)
                .unwrap_or(0);
            let inv = match nodelist {
                Some(expr) => NodeInventory::from_nodelist(expr, gpus)?,
                None => {
                    let var = Workspace::discover(&start_dir(cli)?)
                        .map(|ws| ws.manifest().node_env_var.clone())
                        .unwrap_or_else(|_| crate::manifest::DEFAULT_NODE_ENV.to_string());
                    NodeInventory::discover(&var, gpus)?
                }
            };
            o.field("nodes", inv.nodes.len());
            for n in &inv.nodes {
                o.field("node", format!("{}\t{}\t{}", n.hostname, n.gpus, n.state));
            }
            Ok(0)
        }
        Command::Gpus => {
            let ws = open_ws(cli)?;
            let slots = scheduler::run_probe(&ws.manifest().gpu_probe_command)?;
            o.field("gpus", slots.len());
            for s in &slots {
                let state = if s.is_free() { "free" } else { "busy" };
                o.field(
                    "gpu",
                    format!("{}\t{state}\t{}MiB\t{}%", s.index, s.memory_used_mib, s.utilization),
                );
            }
            Ok(0)
        }
        Command::Session(SessionCommand::Start { agent, script }) => session_start(&open_ws(cli)?, agent, script.as_deref(), o),
        Command::Session(SessionCommand::Resume) => {
            let ws = open_ws(cli)?;
            let state = bootstrap_session(&ws)?;
            guardrails::run_hooks(&ws, Trigger::SessionStart, &HookContext::default())?;
            print_session(&ws, &state, o)
        }
        Command::Instructions(InstructionsCommand::Fill { file, overwrite }) => {
            let ws = open_ws(cli)?;
            let text = if file.as_os_str() == "-" {
                let mut s = String::new();
                std::io::stdin().read_to_string(&mut s).map_err(|e| Error::io("<stdin>", e))?;
                s
            } else {
                fs::read_to_string(file).at(file)?
            };
            let mut paths = vec![workspace::INSTRUCTIONS_FILE.to_string()];
            paths.extend(ws.manifest().agent_aliases.iter().cloned());
            let refs: Vec<&str> = paths.iter().map(String::as_str).collect();
            guarded_edit(&ws, &refs, false, || workspace::fill_project_section(&ws, &text, *overwrite))?;
            o.field("instructions", ws.instructions_path().display());
            Ok(0)
        }
        Command::Cite(CiteCommand::List) => {
            let ws = open_ws(cli)?;
            let entries = report::load_bibliography(ws.root())?;
            o.field("entries", entries.len());
            for e in &entries {
                let status = match e.status {
                    report::BibStatus::Verified => "verified",
                    report::BibStatus::Unverified => "unverified",
                };
                o.field("cite", format!("{}\t{status}\t{}", e.key, e.title));
            }
            Ok(0)
        }
        Command::Cite(CiteCommand::Verify { key, url, title }) => {
            let ws = open_ws(cli)?;
            let entry = guarded_edit(&ws, &[report::BIB_STATUS_FILE], true, || {
                report::mark_verified(ws.root(), key, url, title)
            })?;
            o.field("verified", entry.key);
            Ok(0)
        }
        Command::Unlock { path, reason } => {
            let ws = open_ws(cli)?;
            let locked = guardrails::read_lockfile(&ws)?;
            if !locked.contains_key(path) {
                return Err(Error::NotFound(format!("`{path}` is not a protected path")));
            }
            if reason.trim().is_empty() {
                return Err(Error::Invalid("an unlock needs a reason".into()));
            }
            let token = UnlockToken {
                path: path.clone(),
                digest: guardrails::current_digest(ws.root(), path)?,
                reason: reason.clone(),
            };
            let name: String = path.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
            let file = ws.root().join(UNLOCK_DIR).join(format!("{name}-{}.unlock", &token.digest[..12.min(token.digest.len())]));
            let text = toml::to_string(&token).map_err(|e| Error::Invalid(e.to_string()))?;
            atomic_write(&file, text.as_bytes())?;
            o.field("unlock", file.display());
            Ok(0)
        }
        Command::Worktree(WorktreeCommand::Open { branch }) => {
            let ws = open_ws(cli)?;
            let path = ledger::open_worktree(&ws, branch)?;
            o.field("worktree", path.display());
            Ok(0)
        }
        Command::Run { command, log, timeout } => {
            let ws = open_ws(cli)?;
            let policy = SandboxPolicy::for_workspace(ws.root(), &ws.manifest().sandbox);
            let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
            let log = log.clone().unwrap_or_else(|| PathBuf::from(format!("logs/run/{stamp}.log")));
            let opts = SpawnOptions {
                cwd: Some(start_dir(cli)?),
                registry: Some(ws.logs_dir().join("processes")),
                ..SpawnOptions::default()
            };
            let proc = supervisor::spawn_with(&policy, command, &log, &opts)?;
            if proc.state().is_terminal() {
                // Refused before it started.
            } else if let Some(t) = timeout {
                proc.wait_timeout(Some(Duration::from_secs(*t)), Duration::from_millis(50))?;
            } else {
                supervisor::wait_idle(&[&proc], Duration::from_millis(50), Some(&ws.root().join(IDLE_FILE)))?;
            }
            o.field("log", log.display());
            match proc.state() {
                ProcessState::Exited(c) => {
                    o.field("exit", c);
                    Ok(0)
                }
                ProcessState::Killed(crate::supervisor::KillReason::Policy(d)) => Err(Error::Policy(d)),
                ProcessState::Killed(r) => {
                    o.field("killed", format!("{r:?}").to_lowercase());
                    Ok(0)
                }
                ProcessState::Running => unreachable!("waited above"),
            }
        }
        Command::Tail { path, lines } => {
            let text = supervisor::tail(path, *lines)?;
            let _ = o.w.write_all(text.as_bytes());
            Ok(0)
        }
    }
}

fn status(ws: &Workspace, o: &mut Out) -> Result<i32> {
    let state = bootstrap_session(ws)?;
    let code = print_session(ws, &state, o)?;
    let procs = supervisor::running_processes(&ws.logs_dir().join("processes"));
    o.field("processes", procs.len());
    for p in &procs {
        o.field("process", format!("{}\t{}\t{}", p.pid, p.command, p.log_path.display()));
    }
    match scheduler::run_probe(&ws.manifest().gpu_probe_command) {
        Ok(slots) => {
            o.field("gpus", slots.len());
            o.field("gpus_free", slots.iter().filter(|s| s.is_free()).count());
        }
        Err(e) => {
            o.field("gpus", 0);
            o.text(format!("  (probe unavailable: {e})"));
        }
    }
    o.field("idle_s", format!("{:.1}", supervisor::read_idle(&ws.root().join(IDLE_FILE))));
    Ok(code)
}

fn print_session(ws: &Workspace, s: &workspace::SessionState, o: &mut Out) -> Result<i32> {
    o.field("branch", &s.current_branch);
    o.field("head", &s.last_commit);
    o.field("experiments", s.experiments.len());
    for r in &s.experiments {
        print_record(o, r);
    }
    for p in ledger::open_plans(ws)? {
        o.field("open", format!("{}\t{}", p.id, p.description));
    }
    o.field("open_todos", s.open_todos.len());
    for t in &s.open_todos {
        o.field("todo", format!("{}\t{}", t.kind.as_str(), t.text));
    }
    let blocking = s.pending_violations.iter().filter(|v| v.severity == Severity::Block).count();
    o.field("violations", s.pending_violations.len());
    o.violations(&s.pending_violations);
    Ok(if blocking > 0 { 1 } else { 0 })
}

fn parse_result_ref(s: &str) -> Result<ResultRef> {
    let bad = || Error::Invalid(format!("result `{s}` is not `tier:metric=value`"));
    let (tier, rest) = s.split_once(':').ok_or_else(bad)?;
    let (metric, value) = rest.split_once('=').ok_or_else(bad)?;
    Ok(ResultRef {
        tier: tier.parse().map_err(|_| bad())?,
        metric: metric.to_string(),
        value: value.parse().map_err(|_| bad())?,
    })
}

fn append_sections(ws: &Workspace, sections: &[ExperimentSection]) -> Result<()> {
    let path = ws.report_path();
    guarded_edit(ws, &[report::REPORT_FILE], true, || {
        let mut doc = ReportDocument::load(&path)?;
        for s in sections {
            doc = append_section(&doc, s)?;
        }
        doc.save(&path)
    })
}

fn exp(ws: &Workspace, c: &ExpCommand, o: &mut Out) -> Result<i32> {
    match c {
        ExpCommand::Begin {
            description,
            parent,
            replicate,
        } => {
            let plan = ledger::begin_experiment(ws, description, *parent, *replicate)?;
            o.field("experiment", plan.id);
            o.field("branch", &plan.branch);
            Ok(0)
        }
        ExpCommand::Record(a) => {
            let id = current_experiment(ws, a.id)?;
            let mut section = ExperimentSection::new(
                id,
                a.title.clone(),
                [
                    &a.goal,
                    &a.hypothesis,
                    &a.method,
                    &a.implementation,
                    &a.results,
                    &a.analysis,
                    &a.next_steps,
                ],
            );
            section.claims = a.claims.iter().map(Claim::unverified).collect();
            section.results_refs = a.results_refs.iter().map(|r| parse_result_ref(r)).collect::<Result<_>>()?;
            append_sections(ws, &[section])?;
            o.field("recorded", id);
            Ok(0)
        }
        ExpCommand::Commit { id, tags } => {
            let id = current_experiment(ws, *id)?;
            let mut draft = ledger::draft_for(ws, id)?;
            draft.tags = tags.clone();
            let r = ledger::commit_experiment(ws, &draft)?;
            o.field("commit", &r.commit);
            o.field("subject", r.message()?.render().lines().next().unwrap_or_default());
            Ok(0)
        }
        ExpCommand::List {
            branch,
            metric,
            tag,
            ids,
        } => {
            let id_range = match ids {
                Some(r) => {
                    let (lo, hi) = r
                        .split_once("..")
                        .ok_or_else(|| Error::Invalid(format!("id range `{r}` is not `EXXX..EYYY`")))?;
                    Some((lo.parse().map_err(|e: ledger::BadId| Error::Invalid(e.to_string()))?, hi.parse().map_err(|e: ledger::BadId| Error::Invalid(e.to_string()))?))
                }
                None => None,
            };
            let filter = Filter {
                branch: branch.clone(),
                metric: metric.clone(),
                tag: tag.clone(),
                id_range,
            };
            let records = ledger::query(ws, &filter)?;
            o.field("experiments", records.len());
            for r in &records {
                print_record(o, r);
            }
            Ok(0)
        }
        ExpCommand::Best { metric, direction } => {
            let d: Direction = direction.parse()?;
            match ledger::best_by(ws, metric, d)? {
                Some(r) => print_record(o, &r),
                None => o.field("experiment", "none"),
            }
            Ok(0)
        }
    }
}

fn report_cmd(ws: &Workspace, c: &ReportCommand, o: &mut Out) -> Result<i32> {
    match c {
        ReportCommand::Validate { strict } => {
            let mut problems: Vec<String> = Vec::new();
            let text = fs::read_to_string(ws.report_path()).at(ws.report_path())?;
            let sections = match parse_report(&text) {
                Ok(doc) => doc.ids(),
                Err(errs) => {
                    problems.extend(errs.0.iter().map(|e| e.to_string()));
                    Vec::new()
                }
            };
            let todo = fs::read_to_string(ws.todo_path()).at(ws.todo_path())?;
            if let Err(errs) = TodoList::parse(&todo) {
                problems.extend(errs.0.iter().map(|e| e.to_string()));
            }
            if *strict && problems.is_empty() {
                let committed: BTreeSet<ExperimentId> = ledger::scan(&ws.git())?.records.iter().map(|r| r.id).collect();
                let open: BTreeSet<ExperimentId> = ledger::open_plans(ws)?.iter().map(|p| p.id).collect();
                let recorded: BTreeSet<ExperimentId> = sections.iter().copied().collect();
                for id in committed.difference(&recorded) {
                    problems.push(format!("{id} has a ledger commit but no report.tex section"));
                }
                for id in recorded.difference(&committed).filter(|id| !open.contains(id)) {
                    problems.push(format!("{id} has a report.tex section but no ledger commit"));
                }
            }
            o.field("sections", sections.len());
            o.field("errors", problems.len());
            for p in &problems {
                o.field("error", p);
            }
            Ok(if problems.is_empty() { 0 } else { 1 })
        }
        ReportCommand::Append { file } => {
            let text = fs::read_to_string(file).at(file)?;
            let wrapped = format!("{REGION_BEGIN}\n{}\n{REGION_END}\n", text.trim_end());
            let doc = parse_report(&wrapped)?;
            if doc.sections.is_empty() {
                return Err(Error::Invalid(format!("{} holds no `\\subsection{{EXXX: ...}}` block", file.display())));
            }
            append_sections(ws, &doc.sections)?;
            for s in &doc.sections {
                o.field("recorded", s.id);
            }
            Ok(0)
        }
        ReportCommand::Grade {
            id,
            claim,
            grade,
            evidence,
        } => {
            let grade: Grade = grade.parse()?;
            let evidence = match evidence {
                Some(script) => {
                    let policy = SandboxPolicy::for_workspace(ws.root(), &ws.manifest().sandbox);
                    let log = PathBuf::from(format!("logs/{id}/evidence-{claim}.log"));
                    let p = supervisor::spawn(&policy, script, &log)?;
                    let status = match p.wait()? {
                        ProcessState::Exited(0) => EvidenceStatus::Pass,
                        ProcessState::Killed(crate::supervisor::KillReason::Policy(d)) => return Err(Error::Policy(d)),
                        _ => EvidenceStatus::Fail,
                    };
                    o.field("evidence", if status == EvidenceStatus::Pass { "pass" } else { "fail" });
                    Some(Evidence {
                        script: script.clone(),
                        status,
                    })
                }
                None => None,
            };
            let path = ws.report_path();
            guarded_edit(ws, &[report::REPORT_FILE], true, || {
                let doc = ReportDocument::load(&path)?;
                grade_claim(&doc, *id, *claim, grade, evidence)?.save(&path)
            })?;
            o.field("graded", format!("{id} claim {claim} {}", grade.as_str()));
            Ok(0)
        }
    }
}

fn todo(ws: &Workspace, c: &TodoCommand, o: &mut Out) -> Result<i32> {
    let edit = match c {
        TodoCommand::List { all } => {
            let list = TodoList::load(&ws.todo_path())?;
            for item in list.items().filter(|i| *all || i.state == TodoState::Open) {
                let mark = if item.state == TodoState::Done { "done" } else { "open" };
                o.field("todo", format!("{mark}\t{}\t{}", item.kind.as_str(), item.text));
            }
            return Ok(0);
        }
        TodoCommand::Add { text, kind } => TodoEdit::Add {
            text: text.clone(),
            kind: kind.parse::<TodoKind>()?,
        },
        TodoCommand::Check { text } => TodoEdit::Check { text: text.clone() },
        TodoCommand::Uncheck { text } => TodoEdit::Uncheck { text: text.clone() },
    };
    let path = ws.todo_path();
    guarded_edit(ws, &[report::TODO_FILE], true, || {
        let mut list = TodoList::load(&path)?;
        list.apply(&edit)?;
        list.save(&path)
    })?;
    o.field("todo", "ok");
    Ok(0)
}

fn dispatch_remote(ws: &Workspace, a: &DispatchArgs, o: &mut Out) -> Result<i32> {
    let m = ws.manifest();
    let command = match &a.command {
        Some(c) => c.clone(),
        None => TierSpec::from_manifest(m, 3)?.command,
    };
    let snapshot = ws
        .git()
        .head()?
        .ok_or_else(|| Error::Invalid("the repository has no commits to dispatch".into()))?;
    let job = JobSpec {
        id: a.id,
        snapshot,
        command,
        gpus: a.gpus,
        depends_on: a.depends.clone(),
        image: a.image.clone().or_else(|| m.cluster.container_image.clone()),
    };
    let completed: BTreeSet<ExperimentId> = ledger::scan(&ws.git())?
        .records
        .iter()
        .filter(|r| r.tier_results.get(&3).is_some_and(|t| t.status == TierStatus::Pass))
        .map(|r| r.id)
        .collect();
    let node = NodeInventory::discover(&m.node_env_var, m.cluster.gpus_per_node.max(a.gpus))
        .ok()
        .and_then(|inv| inv.get(&a.node).cloned())
        .unwrap_or(scheduler::Node {
            hostname: a.node.clone(),
            gpus: m.cluster.gpus_per_node.max(a.gpus),
            state: NodeState::Up,
        });
    let transport = SshTransport::new(
        ws.main_root()?.to_string_lossy().into_owned(),
        m.cluster.remote_root.clone().unwrap_or_else(|| "/tmp/expharness".into()),
        m.sandbox.runtime.clone(),
    );
    let mut d = Dispatcher::new(transport, ws.logs_dir(), completed);
    let mut h = d.remote_run(job, &node)?;
    o.field("experiment", h.job.id);
    o.field("node", &h.node);
    o.field("log", h.log_path.display());
    if a.wait {
        while !d.poll(&mut h)?.is_terminal() {
            std::thread::sleep(Duration::from_secs(2));
        }
        if let HandleStatus::Done(_) = h.status {
            let dest = ws.logs_dir().join(a.id.to_string()).join("remote");
            for f in d.fetch(&h, &dest)? {
                o.field("fetched", f.display());
            }
        }
    }
    o.field(
        "status",
        match h.status {
            HandleStatus::Pending => "pending".to_string(),
            HandleStatus::Running => "running".to_string(),
            HandleStatus::Done(c) => format!("exit {c}"),
            HandleStatus::Lost => "lost".to_string(),
        },
    );
    Ok(0)
}

fn print_event(o: &mut Out, e: &agent::AgentEvent) {
    let body = match &e.kind {
        EventKind::FileEdit { paths } => format!("file_edit\t{}", paths.join(" ")),
        EventKind::CommandRun { command, exit } => format!("command_run\t{exit}\t{command}"),
        EventKind::Message { text } => format!("message\t{text}"),
        EventKind::SessionEnd => "session_end".to_string(),
    };
    o.field("event", format!("{}\t{body}", e.seq));
}

fn session_start(ws: &Workspace, agent_name: &str, script: Option<&Path>, o: &mut Out) -> Result<i32> {
    if agent_name == "fake" {
        let script = script.ok_or_else(|| Error::Invalid("the fake agent needs --script".into()))?;
        let script = AgentScript::load(script)?;
        bootstrap_session(ws)?;
        guardrails::run_hooks(ws, Trigger::SessionStart, &HookContext::default())?;
        let mut s = FakeSession::new(ws, script)?;
        s.run()?;
        for e in &s.events {
            print_event(o, e);
        }
        return match s.halted {
            None => Ok(0),
            Some(Halt::Blocked { action, violations }) => {
                o.field("halted", format!("action {}", action + 1));
                Err(Error::Violations(violations))
            }
            Some(Halt::Policy { action, detail }) => {
                o.field("halted", format!("action {}", action + 1));
                Err(Error::Policy(detail))
            }
        };
    }
    let adapter = AdapterConfig::load(agent_name)?;
    if agent::find_binary(&adapter.binary).is_none() {
        return Err(Error::NotFound(format!("agent binary `{}` not found", adapter.binary)));
    }
    bootstrap_session(ws)?;
    guardrails::run_hooks(ws, Trigger::SessionStart, &HookContext::default())?;
    let mut session = agent::start_session(ws, &adapter, &ws.instructions_path())?;
    o.field("pid", session.process().pid());
    loop {
        match session.next_event()? {
            Some(e) => {
                print_event(o, &e);
                if e.kind == EventKind::SessionEnd {
                    return Ok(0);
                }
            }
            None if !session.blocked().is_empty() => {
                o.field("paused", session.blocked().len());
                o.violations(session.blocked());
                let _ = o.w.flush();
                while !session.resume()? {
                    std::thread::sleep(Duration::from_secs(2));
                }
                o.field("resumed", session.process().pid());
            }
            None => return Ok(0),
        }
    }
}

//! `hooks.cfg` parsing and the hook runner.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Duration;

use super::{
    check_protected, check_tier_order, check_one_variable, read_lockfile, record_gap, HookContext, RuleId, Severity,
    Trigger, VariableManifest, Violation,
};
use crate::error::{Error, Result};
use crate::evaluation::{gate_violation, statuses};
use crate::fsutil::append_line;
use crate::ledger::{self, RecordDraft};
use crate::report::{self, parse_report, ReportError, TodoList, REPORT_FILE, TODO_FILE};
use crate::supervisor::{self, KillReason, ProcessState, SandboxPolicy, SpawnOptions};
use crate::workspace::Workspace;

pub const HOOKS_FILE: &str = "hooks.cfg";
pub const HOOK_LOG: &str = "logs/hooks.log";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HookAction {
    Rule(RuleId),
    Command(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookEntry {
    pub trigger: Trigger,
    pub action: HookAction,
    pub severity: Severity,
    pub line: usize,
}

impl HookEntry {
    fn label(&self) -> String {
        match &self.action {
            HookAction::Rule(r) => r.to_string(),
            HookAction::Command(c) => format!("`{c}`"),
        }
    }
}

/// Parse `on <trigger> run <rule-id | command...> [severity=block|warn]`
/// lines. Blank lines and `#` comments are ignored.
pub fn parse_hooks(text: &str) -> Result<Vec<HookEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |why: &str| Error::Invalid(format!("{HOOKS_FILE}:{}: {why}: `{line}`", i + 1));
        let rest = line.strip_prefix("on ").ok_or_else(|| err("expected `on <trigger> run ...`"))?;
        let (trigger, rest) = rest.split_once(' ').ok_or_else(|| err("missing `run`"))?;
        let trigger: Trigger = trigger.parse().map_err(|e: Error| err(&e.to_string()))?;
        let rest = rest.trim_start().strip_prefix("run ").ok_or_else(|| err("missing `run`"))?.trim();
        let (body, severity) = match rest.rsplit_once(' ') {
            Some((body, sev)) if sev.starts_with("severity=") => {
                let s: Severity = sev["severity=".len()..].parse().map_err(|e: Error| err(&e.to_string()))?;
                (body.trim(), s)
            }
            _ => (rest, Severity::Block),
        };
        if body.is_empty() {
            return Err(err("nothing to run"));
        }
        let action = match body.parse::<RuleId>() {
            Ok(RuleId::HookCommand) => return Err(err("HOOK_COMMAND is not a rule that can be run by name")),
            Ok(rule) => HookAction::Rule(rule),
            Err(_) if body.chars().all(|c| c.is_ascii_uppercase() || c == '_') => {
                return Err(err("unknown rule id"));
            }
            Err(_) => HookAction::Command(body.to_string()),
        };
        out.push(HookEntry {
            trigger,
            action,
            severity,
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn load_hooks(ws: &Workspace) -> Result<Vec<HookEntry>> {
    let path = ws.root().join(HOOKS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Inconsistent(vec![format!("{HOOKS_FILE} cannot be read ({e}); hooks fail closed")])
    })?;
    parse_hooks(&text)
}

pub fn blocking(violations: Vec<Violation>) -> Vec<Violation> {
    violations.into_iter().filter(|v| v.severity == Severity::Block).collect()
}

/// Experiment the context refers to, with its draft, falling back to the
/// newest open plan.
fn resolve(ws: &Workspace, ctx: &HookContext) -> Result<Option<RecordDraft>> {
    if let Some(d) = &ctx.draft {
        return Ok(Some(d.clone()));
    }
    let id = match ctx.experiment {
        Some(id) => Some(id),
        None => ledger::open_plans(ws)?.last().map(|p| p.id),
    };
    match id {
        Some(id) => Ok(Some(ledger::draft_for(ws, id)?)),
        None => Ok(None),
    }
}

fn report_errors(root: &Path) -> Result<Vec<(String, ReportError)>> {
    let mut out = Vec::new();
    let path = root.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    if let Err(errs) = parse_report(&text) {
        out.extend(errs.0.into_iter().map(|e| (REPORT_FILE.to_string(), e)));
    }
    let path = root.join(TODO_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    if let Err(errs) = TodoList::parse(&text) {
        out.extend(errs.0.into_iter().map(|e| (TODO_FILE.to_string(), e)));
    }
    Ok(out)
}

fn one_variable(ws: &Workspace, ctx: &HookContext) -> Result<Vec<Violation>> {
    let draft = resolve(ws, ctx)?;
    let git = ws.git();
    let parent_commit = match draft.as_ref().and_then(|d| d.parent) {
        Some(parent) => {
            let scan = ledger::scan(&git)?;
            let rec = scan
                .records
                .iter()
                .find(|r| r.id == parent)
                .ok_or_else(|| Error::NotFound(format!("parent {parent} has no ledger commit")))?;
            Some(rec.commit.clone())
        }
        None => git.head()?,
    };
    let Some(parent_commit) = parent_commit else {
        return Ok(Vec::new());
    };
    let parent = VariableManifest::from_commit(&git, &parent_commit)?;
    let child = VariableManifest::from_worktree(ws.root(), &ws.manifest().variables)?;
    let replicate = draft.as_ref().is_some_and(|d| d.replicate);
    let check = check_one_variable(&parent, &child, replicate)?;
    let subject = draft.and_then(|d| d.id).map(|id| id.to_string());
    Ok(check
        .violation
        .into_iter()
        .map(|mut v| {
            if let Some(s) = &subject {
                v.subject = s.clone();
            }
            v
        })
        .collect())
}

fn tier_order(ws: &Workspace, trigger: Trigger, ctx: &HookContext) -> Result<Vec<Violation>> {
    let Some(draft) = resolve(ws, ctx)? else {
        return Ok(Vec::new());
    };
    let Some(id) = draft.id else {
        return Ok(Vec::new());
    };
    let st = statuses(&draft.tier_results);
    if trigger == Trigger::ExperimentRun {
        if let Some(tier) = ctx.tier {
            return Ok(gate_violation(&id.to_string(), &st, tier).into_iter().collect());
        }
    }
    let doc = report::ReportDocument::load(&ws.report_path()).ok();
    let refs = doc
        .as_ref()
        .and_then(|d| d.section(id))
        .map(|s| s.results_refs.clone())
        .unwrap_or_default();
    Ok(check_tier_order(&id.to_string(), &st, &refs))
}

fn record_before_iterate(ws: &Workspace) -> Result<Vec<Violation>> {
    let scan = ledger::scan(&ws.git())?;
    let committed: BTreeSet<_> = scan.records.iter().map(|r| r.id).collect();
    let recorded: BTreeSet<_> = match report::ReportDocument::load(&ws.report_path()) {
        Ok(doc) => doc.ids().into_iter().collect(),
        Err(_) => BTreeSet::new(),
    };
    Ok(record_gap(&committed, &recorded).into_iter().collect())
}

fn evaluate(ws: &Workspace, rule: RuleId, trigger: Trigger, ctx: &HookContext) -> Result<Vec<Violation>> {
    match rule {
        RuleId::ProtectedEval => {
            let touched: Vec<String> = if trigger == Trigger::FileEdit {
                ctx.touched.clone()
            } else {
                read_lockfile(ws)?.into_keys().collect()
            };
            check_protected(ws, &touched)
        }
        RuleId::ReportFields => Ok(report_errors(ws.root())?
            .into_iter()
            .filter(|(_, e)| !matches!(e, ReportError::UnsupportedClaim { .. }))
            .map(|(file, e)| Violation::new(RuleId::ReportFields, Severity::Block, file, e.to_string()))
            .collect()),
        RuleId::ClaimGrades => Ok(report_errors(ws.root())?
            .into_iter()
            .filter(|(_, e)| matches!(e, ReportError::UnsupportedClaim { .. }))
            .map(|(file, e)| Violation::new(RuleId::ClaimGrades, Severity::Block, file, e.to_string()))
            .collect()),
        RuleId::CitationStatus => Ok(report::load_bibliography(ws.root())?
            .into_iter()
            .filter(|e| e.status == report::BibStatus::Unverified)
            .map(|e| {
                Violation::new(
                    RuleId::CitationStatus,
                    Severity::Block,
                    e.key.clone(),
                    format!("citation `{}` has not been verified against its source", e.key),
                )
            })
            .collect()),
        RuleId::OneVariable => one_variable(ws, ctx),
        RuleId::TierOrder => tier_order(ws, trigger, ctx),
        RuleId::RecordBeforeIterate => record_before_iterate(ws),
        RuleId::HookCommand => Ok(Vec::new()),
    }
}

/// Evaluate one rule; an evaluation error becomes a blocking violation so
/// a broken check never passes silently.
fn evaluate_closed(ws: &Workspace, rule: RuleId, trigger: Trigger, ctx: &HookContext, severity: Severity) -> Vec<Violation> {
    match evaluate(ws, rule, trigger, ctx) {
        Ok(vs) => vs.into_iter().map(|v| v.with_severity(severity)).collect(),
        Err(e) => vec![Violation::new(rule, Severity::Block, trigger.as_str(), format!("check could not be evaluated: {e}"))],
    }
}

fn run_command(ws: &Workspace, entry: &HookEntry, index: usize, command: &str, ctx: &HookContext) -> Result<Vec<Violation>> {
    let rel_log = format!("logs/hooks/{}-{}.log", entry.trigger, index);
    let policy = SandboxPolicy::for_workspace(ws.root(), &ws.manifest().sandbox);
    let mut env = vec![
        ("EXH_TRIGGER".to_string(), entry.trigger.to_string()),
        ("EXH_TOUCHED".to_string(), ctx.touched.join(" ")),
    ];
    if let Some(id) = ctx.experiment {
        env.push(("EXH_EXPERIMENT".into(), id.to_string()));
    }
    let opts = SpawnOptions {
        env,
        ..SpawnOptions::default()
    };
    let budget = Duration::from_secs(ws.manifest().tier_budgets.tier1);
    let fail = |severity, detail: String| {
        vec![Violation::new(RuleId::HookCommand, severity, command, format!("{detail}; log {rel_log}"))]
    };
    let proc = match supervisor::spawn_with(&policy, command, Path::new(&rel_log), &opts) {
        Ok(p) => p,
        Err(e) => return Ok(fail(Severity::Block, format!("hook could not start: {e}"))),
    };
    Ok(match proc.wait_timeout(Some(budget), Duration::from_millis(10))? {
        ProcessState::Exited(0) => Vec::new(),
        ProcessState::Exited(127) => fail(Severity::Block, "hook command not found (exit 127)".into()),
        ProcessState::Exited(code) => fail(entry.severity, format!("hook exited with status {code}")),
        ProcessState::Killed(KillReason::Policy(r)) => fail(Severity::Block, format!("hook refused by sandbox: {r}")),
        ProcessState::Killed(r) => fail(Severity::Block, format!("hook killed: {r:?}")),
        ProcessState::Running => unreachable!("wait returns terminal states"),
    })
}

fn log_line(trigger: Trigger, ctx: &HookContext, entry: &HookEntry, found: &[Violation]) -> String {
    let mut s = format!("{trigger}");
    if !ctx.touched.is_empty() {
        s.push_str(&format!(" [{}]", ctx.touched.join(" ")));
    }
    if let Some(id) = ctx.experiment {
        s.push_str(&format!(" {id}"));
    }
    s.push_str(&format!(" {} -> ", entry.label()));
    if found.is_empty() {
        s.push_str("ok");
    } else {
        let b = found.iter().filter(|v| v.severity == Severity::Block).count();
        s.push_str(&format!("{b} block, {} warn", found.len() - b));
    }
    s
}

/// Run every hook registered for `trigger` in declaration order, without
/// stopping at the first block, and log each invocation to `logs/hooks.log`.
pub fn run_hooks(ws: &Workspace, trigger: Trigger, ctx: &HookContext) -> Result<Vec<Violation>> {
    let entries = load_hooks(ws)?;
    let mut out = Vec::new();
    for (i, entry) in entries.iter().enumerate().filter(|(_, e)| e.trigger == trigger) {
        let found = match &entry.action {
            HookAction::Rule(rule) => evaluate_closed(ws, *rule, trigger, ctx, entry.severity),
            HookAction::Command(cmd) => run_command(ws, entry, i + 1, cmd, ctx)?,
        };
        append_line(&ws.root().join(HOOK_LOG), &log_line(trigger, ctx, entry, &found))?;
        out.extend(found);
    }
    Ok(out)
}

/// Rule hooks for `trigger` only: no commands, no logging. Used where the
/// caller must not write (session bootstrap).
pub fn evaluate_rules(ws: &Workspace, trigger: Trigger, ctx: &HookContext) -> Result<Vec<Violation>> {
    let mut out = Vec::new();
    for entry in load_hooks(ws)?.iter().filter(|e| e.trigger == trigger) {
        if let HookAction::Rule(rule) = entry.action {
            out.extend(evaluate_closed(ws, rule, trigger, ctx, entry.severity));
        }
    }
    Ok(out)
}

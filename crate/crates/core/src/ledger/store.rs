use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::grammar::{looks_like_experiment, parse_commit, CommitMessage, Metric};
use super::id::ExperimentId;
use crate::error::{Error, IoContext, Result};
use crate::evaluation::{self, TierResult, TierStatus};
use crate::fsutil::{atomic_write, FileLock};
use crate::git::{Git, LogEntry};
use crate::guardrails::{self, HookContext, RuleId, Severity, Trigger, VariableManifest, Violation};
use crate::report::ReportDocument;
use crate::workspace::Workspace;

const TRAILER_BRANCH: &str = "Experiment-Branch";
const TRAILER_PARENT: &str = "Experiment-Parent";
const TRAILER_CONFIG: &str = "Config-Digest";
const TRAILER_TIER: &str = "Tier-";

pub const MILESTONE_NAMESPACE: &str = "milestone";
const RESERVATIONS: &str = "reservations";

/// One committed experiment, reconstructed from its commit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub id: ExperimentId,
    pub description: String,
    pub metrics: Vec<Metric>,
    pub tier_results: BTreeMap<u8, TierResult>,
    pub parent: Option<ExperimentId>,
    pub branch: String,
    pub tags: Vec<String>,
    pub commit: String,
    pub config_digest: String,
}

impl ExperimentRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn message(&self) -> Result<CommitMessage> {
        Ok(CommitMessage::new(
            self.id,
            self.description.clone(),
            self.metrics.clone(),
        )?)
    }

    /// Stored records never carry tier 3 without passing tiers 1 and 2.
    pub fn tier_gate_holds(&self) -> bool {
        !self.tier_results.contains_key(&3)
            || [1, 2].iter().all(|t| {
                self.tier_results
                    .get(t)
                    .is_some_and(|r| r.status == TierStatus::Pass)
            })
    }
}

/// What the coordinating session wants to commit for one experiment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecordDraft {
    pub id: Option<ExperimentId>,
    pub description: String,
    pub parent: Option<ExperimentId>,
    pub tier_results: BTreeMap<u8, TierResult>,
    pub tags: Vec<String>,
    /// Seed-replication run: an unchanged configuration is allowed.
    pub replicate: bool,
}

fn render_body(record: &ExperimentRecord) -> String {
    let mut body = format!("{TRAILER_BRANCH}: {}\n", record.branch);
    if let Some(p) = record.parent {
        body.push_str(&format!("{TRAILER_PARENT}: {p}\n"));
    }
    body.push_str(&format!("{TRAILER_CONFIG}: {}\n", record.config_digest));
    for (tier, result) in &record.tier_results {
        body.push_str(&format!(
            "{TRAILER_TIER}{tier}: {}\n",
            serde_json::to_string(result).expect("tier result serializes")
        ));
    }
    body
}

fn parse_entry(entry: &LogEntry, tags: &BTreeMap<String, Vec<String>>) -> Result<ExperimentRecord, String> {
    let msg = parse_commit(&entry.subject).map_err(|e| e.to_string())?;
    let mut branch = None;
    let mut parent = None;
    let mut config = None;
    let mut tiers = BTreeMap::new();
    for line in entry.body.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| format!("malformed trailer `{line}`"))?;
        match key {
            TRAILER_BRANCH => branch = Some(value.to_string()),
            TRAILER_PARENT => {
                parent = Some(
                    value
                        .parse::<ExperimentId>()
                        .map_err(|e| e.to_string())?,
                )
            }
            TRAILER_CONFIG => config = Some(value.to_string()),
            k if k.starts_with(TRAILER_TIER) => {
                let tier: u8 = k[TRAILER_TIER.len()..]
                    .parse()
                    .map_err(|_| format!("bad tier trailer `{k}`"))?;
                let result: TierResult = serde_json::from_str(value)
                    .map_err(|e| format!("bad tier {tier} result: {e}"))?;
                if result.tier != tier || !(1..=3).contains(&tier) {
                    return Err(format!("tier trailer {tier} holds a tier {} result", result.tier));
                }
                tiers.insert(tier, result);
            }
            _ => return Err(format!("unknown trailer `{key}`")),
        }
    }
    let record = ExperimentRecord {
        id: msg.id(),
        description: msg.description().to_string(),
        metrics: msg.metrics().to_vec(),
        tier_results: tiers,
        parent,
        branch: branch.ok_or("missing Experiment-Branch trailer")?,
        tags: tags.get(&entry.hash).cloned().unwrap_or_default(),
        commit: entry.hash.clone(),
        config_digest: config.ok_or("missing Config-Digest trailer")?,
    };
    if record.parent.is_some_and(|p| p >= record.id) {
        return Err(format!("parent {} is not older than {}", record.parent.unwrap(), record.id));
    }
    if !record.tier_gate_holds() {
        return Err("tier 3 recorded without passing tiers 1 and 2".into());
    }
    Ok(record)
}

/// Result of reading the full history.
#[derive(Debug, Clone, Default)]
pub struct Scan {
    pub records: Vec<ExperimentRecord>,
    /// `(commit, problem)` for commits whose subject starts with `exp(` but
    /// do not form a valid ledger entry.
    pub malformed: Vec<(String, String)>,
}

impl Scan {
    pub fn problems(&self) -> Vec<String> {
        self.malformed
            .iter()
            .map(|(c, p)| format!("commit {c}: {p}"))
            .collect()
    }
}

/// Read every experiment commit reachable from any ref, sorted by ID.
pub fn scan(git: &Git) -> Result<Scan> {
    let mut tags: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (commit, tag) in git.tags_by_commit()? {
        tags.entry(commit).or_default().push(tag);
    }
    let mut out = Scan::default();
    let mut seen: BTreeMap<ExperimentId, String> = BTreeMap::new();
    for entry in git.log_all()? {
        if !looks_like_experiment(&entry.subject) {
            continue;
        }
        match parse_entry(&entry, &tags) {
            Ok(record) => {
                if let Some(other) = seen.get(&record.id) {
                    out.malformed.push((
                        entry.hash.clone(),
                        format!("{} already recorded by commit {other}", record.id),
                    ));
                } else {
                    seen.insert(record.id, entry.hash.clone());
                    out.records.push(record);
                }
            }
            Err(problem) => out.malformed.push((entry.hash.clone(), problem)),
        }
    }
    out.records.sort_by_key(|r| r.id);
    Ok(out)
}

fn reservations_path(ws: &Workspace) -> Result<PathBuf> {
    Ok(ws.state_dir()?.join(RESERVATIONS))
}

fn read_reservations(path: &std::path::Path) -> Result<Vec<ExperimentId>> {
    match fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse()
                    .map_err(|e: super::id::BadId| Error::Invalid(format!("{}: {e}", path.display())))
            })
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Highest ID mentioned by any experiment-looking subject, parseable or not.
fn max_history_id(git: &Git) -> Result<Option<ExperimentId>> {
    Ok(git
        .log_all()?
        .iter()
        .filter_map(|e| {
            let rest = e.subject.strip_prefix(super::grammar::PREFIX)?;
            rest.split(')').next()?.parse::<ExperimentId>().ok()
        })
        .max())
}

/// Reserve the next experiment ID. Safe across threads, processes and
/// worktrees of the same repository.
pub fn allocate_id(ws: &Workspace) -> Result<ExperimentId> {
    let _lock = ws.lock()?;
    allocate_id_locked(ws)
}

fn allocate_id_locked(ws: &Workspace) -> Result<ExperimentId> {
    let path = reservations_path(ws)?;
    let mut reserved = read_reservations(&path)?;
    let max = reserved
        .iter()
        .copied()
        .max()
        .into_iter()
        .chain(max_history_id(&ws.git())?)
        .max();
    let next = max.map(ExperimentId::next).unwrap_or_else(ExperimentId::first);
    reserved.push(next);
    let text: String = reserved.iter().map(|id| format!("{id}\n")).collect();
    atomic_write(&path, text.as_bytes())?;
    Ok(next)
}

/// IDs reserved so far, including ones not yet committed.
pub fn reserved_ids(ws: &Workspace) -> Result<Vec<ExperimentId>> {
    read_reservations(&reservations_path(ws)?)
}

/// Commit an experiment after all blocking guardrails pass.
pub fn commit_experiment(ws: &Workspace, draft: &RecordDraft) -> Result<ExperimentRecord> {
    let _lock = ws.lock()?;
    commit_experiment_locked(ws, draft)
}

fn commit_experiment_locked(ws: &Workspace, draft: &RecordDraft) -> Result<ExperimentRecord> {
    let id = draft
        .id
        .ok_or_else(|| Error::Invalid("draft has no experiment id".into()))?;
    let git = ws.git();
    let history = scan(&git)?;
    if history.records.iter().any(|r| r.id == id) {
        return Err(Error::Conflict(format!("{id} is already committed")));
    }
    if let Some(parent) = draft.parent {
        if parent >= id {
            return Err(Error::Invalid(format!("parent {parent} must be older than {id}")));
        }
    }

    let mut violations = Vec::new();
    let report = ReportDocument::load(&ws.report_path())?;
    let section = report.section(id);
    if section.is_none() {
        violations.push(Violation::new(
            RuleId::RecordBeforeIterate,
            Severity::Block,
            id.to_string(),
            format!("no report section for {id}; every experiment gets a subsection in report.tex before it is committed"),
        ));
    }
    let statuses: BTreeMap<u8, TierStatus> =
        draft.tier_results.iter().map(|(t, r)| (*t, r.status)).collect();
    let refs = section.map(|s| s.results_refs.as_slice()).unwrap_or(&[]);
    violations.extend(guardrails::check_tier_order(&id.to_string(), &statuses, refs));
    let protected: Vec<String> = guardrails::read_lockfile(ws)?.into_keys().collect();
    violations.extend(guardrails::check_protected(ws, &protected)?);
    if draft.tier_results.get(&3).is_none_or(|r| r.status != TierStatus::Pass) {
        violations.push(Violation::new(
            RuleId::TierOrder,
            Severity::Block,
            id.to_string(),
            "an experiment is committed only after a passing tier-3 run; its metrics go into the subject",
        ));
    }
    let ctx = HookContext {
        experiment: Some(id),
        draft: Some(draft.clone()),
        ..HookContext::default()
    };
    violations.extend(guardrails::run_hooks(ws, Trigger::PreCommit, &ctx)?);
    dedup(&mut violations);
    let blocking: Vec<Violation> = violations
        .into_iter()
        .filter(|v| v.severity == Severity::Block)
        .collect();
    if !blocking.is_empty() {
        return Err(Error::Violations(blocking));
    }

    let promoted = evaluation::promote(&draft.tier_results)?;
    let mut metrics: Vec<Metric> = Vec::new();
    for name in &ws.manifest().metric_names {
        if let Some(v) = promoted.get(name) {
            metrics.push(Metric::new(name.clone(), *v));
        }
    }
    for (name, v) in &promoted {
        if !metrics.iter().any(|m| &m.name == name) {
            metrics.push(Metric::new(name.clone(), *v));
        }
    }
    let message = CommitMessage::new(id, draft.description.trim(), metrics)?;
    let config = VariableManifest::from_worktree(ws.root(), &ws.manifest().variables)?;

    let mut record = ExperimentRecord {
        id,
        description: message.description().to_string(),
        metrics: message.metrics().to_vec(),
        tier_results: draft.tier_results.clone(),
        parent: draft.parent,
        branch: git.current_branch()?,
        tags: Vec::new(),
        commit: String::new(),
        config_digest: config.digest(),
    };
    let full = format!("{}\n\n{}", message.render(), render_body(&record));
    git.add_all()?;
    record.commit = git.commit(&full)?;
    let mut tags: BTreeSet<String> = BTreeSet::new();
    for tag in &draft.tags {
        let name = if tag == MILESTONE_NAMESPACE {
            format!("{MILESTONE_NAMESPACE}/{id}")
        } else {
            tag.clone()
        };
        git.tag(&name, &record.commit)?;
        tags.insert(name);
    }
    record.tags = tags.into_iter().collect();
    Ok(record)
}

fn dedup(violations: &mut Vec<Violation>) {
    let mut seen = BTreeSet::new();
    violations.retain(|v| seen.insert((v.rule, v.subject.clone(), v.detail.clone())));
}

/// Check out `branch` in its own directory so a second agent session can
/// work concurrently. Creates the branch from HEAD when it does not exist.
pub fn open_worktree(ws: &Workspace, branch: &str) -> Result<PathBuf> {
    if branch.is_empty() || branch.contains(char::is_whitespace) || branch.starts_with('-') {
        return Err(Error::Invalid(format!("invalid branch name `{branch}`")));
    }
    let git = ws.git();
    let _lock = ws.lock()?;
    for (path, b) in git.worktrees()? {
        if b.as_deref() == Some(branch) {
            return Err(Error::Conflict(format!(
                "branch `{branch}` is already checked out at {}",
                path.display()
            )));
        }
    }
    let dir = ws.main_root()?.join(".worktrees").join(branch.replace('/', "-"));
    if dir.exists() {
        return Err(Error::Conflict(format!("{} already exists", dir.display())));
    }
    git.worktree_add(&dir, branch, !git.branch_exists(branch))?;
    fs::create_dir_all(dir.join("logs")).at(dir.join("logs"))?;
    Ok(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Minimize,
    Maximize,
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" | "minimize" => Ok(Direction::Minimize),
            "max" | "maximize" => Ok(Direction::Maximize),
            _ => Err(Error::Invalid(format!("direction must be minimize or maximize, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Filter {
    pub branch: Option<String>,
    pub metric: Option<String>,
    /// Exact tag name, or a namespace such as `milestone` matching `milestone/*`.
    pub tag: Option<String>,
    pub id_range: Option<(ExperimentId, ExperimentId)>,
}

impl Filter {
    pub fn matches(&self, r: &ExperimentRecord) -> bool {
        self.branch.as_ref().is_none_or(|b| &r.branch == b)
            && self.metric.as_ref().is_none_or(|m| r.metric(m).is_some())
            && self.tag.as_ref().is_none_or(|t| {
                r.tags
                    .iter()
                    .any(|tag| tag == t || tag.strip_prefix(t.as_str()).is_some_and(|s| s.starts_with('/')))
            })
            && self.id_range.is_none_or(|(lo, hi)| lo <= r.id && r.id <= hi)
    }
}

/// Records matching `filter`, sorted by ID.
pub fn filter_records(records: &[ExperimentRecord], filter: &Filter) -> Vec<ExperimentRecord> {
    let mut out: Vec<ExperimentRecord> = records.iter().filter(|r| filter.matches(r)).cloned().collect();
    out.sort_by_key(|r| r.id);
    out
}

/// Extremal record for `metric`; ties go to the lower ID.
pub fn best_of<'a>(
    records: &'a [ExperimentRecord],
    metric: &str,
    direction: Direction,
) -> Option<&'a ExperimentRecord> {
    let mut best: Option<(&ExperimentRecord, f64)> = None;
    for r in records {
        let Some(v) = r.metric(metric) else { continue };
        let better = match best {
            None => true,
            Some((b, bv)) => {
                let strictly = match direction {
                    Direction::Minimize => v < bv,
                    Direction::Maximize => v > bv,
                };
                strictly || (v == bv && r.id < b.id)
            }
        };
        if better {
            best = Some((r, v));
        }
    }
    best.map(|(r, _)| r)
}

fn check_metric(ws: &Workspace, metric: &str) -> Result<()> {
    let known = &ws.manifest().metric_names;
    if known.iter().any(|m| m == metric) {
        Ok(())
    } else {
        Err(Error::NotFound(format!(
            "unknown metric `{metric}`; known metrics: {}",
            known.join(", ")
        )))
    }
}

pub fn query(ws: &Workspace, filter: &Filter) -> Result<Vec<ExperimentRecord>> {
    if let Some(m) = &filter.metric {
        check_metric(ws, m)?;
    }
    Ok(filter_records(&scan(&ws.git())?.records, filter))
}

pub fn best_by(ws: &Workspace, metric: &str, direction: Direction) -> Result<Option<ExperimentRecord>> {
    check_metric(ws, metric)?;
    let records = scan(&ws.git())?.records;
    Ok(best_of(&records, metric, direction).cloned())
}

/// What `exp begin` records under `logs/<id>/experiment.json` until the
/// experiment is committed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub id: ExperimentId,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<ExperimentId>,
    #[serde(default)]
    pub replicate: bool,
    pub branch: String,
}

fn plan_path(ws: &Workspace, id: ExperimentId) -> PathBuf {
    ws.logs_dir().join(id.to_string()).join("experiment.json")
}

pub fn load_plan(ws: &Workspace, id: ExperimentId) -> Result<Option<ExperimentPlan>> {
    let path = plan_path(ws, id);
    match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Invalid(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Plans in this checkout without a ledger commit, oldest first.
pub fn open_plans(ws: &Workspace) -> Result<Vec<ExperimentPlan>> {
    let committed: BTreeSet<ExperimentId> = scan(&ws.git())?.records.iter().map(|r| r.id).collect();
    let mut out = Vec::new();
    let Ok(dir) = fs::read_dir(ws.logs_dir()) else {
        return Ok(out);
    };
    for entry in dir.filter_map(|e| e.ok()) {
        let Ok(id) = entry.file_name().to_string_lossy().parse::<ExperimentId>() else {
            continue;
        };
        if committed.contains(&id) {
            continue;
        }
        if let Some(plan) = load_plan(ws, id)? {
            out.push(plan);
        }
    }
    out.sort_by_key(|p| p.id);
    Ok(out)
}

/// Start a new experiment: refuse while the previous one is unrecorded,
/// then reserve an ID and persist the plan.
pub fn begin_experiment(
    ws: &Workspace,
    description: &str,
    parent: Option<ExperimentId>,
    replicate: bool,
) -> Result<ExperimentPlan> {
    let description = description.trim();
    if !description.is_empty() {
        CommitMessage::new(ExperimentId::first(), description, vec![Metric::new("x", 0.0)])?;
    }
    let _lock = ws.lock()?;
    let git = ws.git();
    let records = scan(&git)?.records;
    let committed: BTreeSet<ExperimentId> = records.iter().map(|r| r.id).collect();
    let mut recorded: BTreeSet<ExperimentId> = ReportDocument::load(&ws.report_path())?.ids().into_iter().collect();
    for plan in open_plans(ws)? {
        if !recorded.contains(&plan.id) {
            return Err(Error::Violations(vec![Violation::new(
                RuleId::RecordBeforeIterate,
                Severity::Block,
                plan.id.to_string(),
                format!("{} was begun but has no report section or ledger commit; record it before starting the next experiment", plan.id),
            )]));
        }
        recorded.insert(plan.id);
    }
    if let Some(v) = guardrails::record_gap(&committed, &recorded) {
        return Err(Error::Violations(vec![v]));
    }
    if let Some(p) = parent {
        if !committed.contains(&p) {
            return Err(Error::NotFound(format!("parent {p} has no ledger commit")));
        }
    }
    let id = allocate_id_locked(ws)?;
    let plan = ExperimentPlan {
        id,
        description: description.to_string(),
        parent,
        replicate,
        branch: git.current_branch()?,
    };
    atomic_write(
        &plan_path(ws, id),
        format!("{}\n", serde_json::to_string_pretty(&plan).expect("serializes")).as_bytes(),
    )?;
    Ok(plan)
}

/// Draft for `id` from its plan and latest tier attempts.
pub fn draft_for(ws: &Workspace, id: ExperimentId) -> Result<RecordDraft> {
    let plan = load_plan(ws, id)?;
    Ok(RecordDraft {
        id: Some(id),
        description: plan.as_ref().map(|p| p.description.clone()).unwrap_or_default(),
        parent: plan.as_ref().and_then(|p| p.parent),
        tier_results: evaluation::latest_results(ws, id)?,
        tags: Vec::new(),
        replicate: plan.is_some_and(|p| p.replicate),
    })
}

/// Acquire the repository-wide lock used for allocation, commits and
/// document mutations.
pub fn repository_lock(ws: &Workspace) -> Result<FileLock> {
    FileLock::acquire(&ws.state_dir()?.join("lock"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n: u32, metrics: &[(&str, f64)], tags: &[&str], branch: &str) -> ExperimentRecord {
        ExperimentRecord {
            id: ExperimentId::new(n).unwrap(),
            description: format!("exp {n}"),
            metrics: metrics.iter().map(|(k, v)| Metric::new(*k, *v)).collect(),
            tier_results: BTreeMap::new(),
            parent: None,
            branch: branch.into(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            commit: format!("{n:040}"),
            config_digest: String::new(),
        }
    }

    #[test]
    fn best_by_minimize_and_ties() {
        let records = vec![
            rec(1, &[("val_ppl", 23.4)], &[], "main"),
            rec(2, &[("val_ppl", 22.1)], &[], "main"),
            rec(3, &[("val_ppl", 22.1)], &[], "main"),
        ];
        let best = best_of(&records, "val_ppl", Direction::Minimize).unwrap();
        assert_eq!(best.id.number(), 2);
        let best = best_of(&records, "val_ppl", Direction::Maximize).unwrap();
        assert_eq!(best.id.number(), 1);
        assert!(best_of(&records, "acc", Direction::Maximize).is_none());
    }

    #[test]
    fn tag_filter_matches_namespace() {
        let records = vec![
            rec(1, &[("a", 1.0)], &["milestone/E001"], "main"),
            rec(2, &[("a", 1.0)], &[], "main"),
            rec(3, &[("a", 1.0)], &["milestones-old"], "wd"),
        ];
        let f = Filter {
            tag: Some("milestone".into()),
            ..Filter::default()
        };
        let ids: Vec<u32> = filter_records(&records, &f).iter().map(|r| r.id.number()).collect();
        assert_eq!(ids, vec![1]);
        let f = Filter {
            branch: Some("wd".into()),
            ..Filter::default()
        };
        assert_eq!(filter_records(&records, &f).len(), 1);
    }

    #[test]
    fn body_roundtrip() {
        let mut r = rec(4, &[("loss", 0.5)], &[], "muon-wd");
        r.parent = ExperimentId::new(2);
        r.config_digest = "ab".repeat(32);
        r.tier_results.insert(
            1,
            TierResult {
                tier: 1,
                status: TierStatus::Pass,
                metrics: BTreeMap::new(),
                log_path: "logs/E004/tier1.log".into(),
                wall_clock_s: 0.25,
            },
        );
        let entry = LogEntry {
            hash: r.commit.clone(),
            subject: r.message().unwrap().render(),
            body: render_body(&r),
        };
        assert_eq!(parse_entry(&entry, &BTreeMap::new()).unwrap(), r);
    }
}

//! Three-tier evaluation: smoke run, small-subset signal, full benchmark.
//! Only tier-3 metrics may reach a commit subject or the report.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::fsutil::append_line;
use crate::guardrails::{self, HookContext, RuleId, Severity, Trigger, Violation};
use crate::ledger::{scan_number, ExperimentId};
use crate::manifest::ProjectManifest;
use crate::supervisor::{self, KillReason, ProcessState, SandboxPolicy, SpawnOptions};
use crate::workspace::Workspace;

/// Lines at the end of a run's output searched for metrics.
pub const METRIC_WINDOW: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TierStatus {
    Pass,
    Fail,
    Timeout,
}

impl TierStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TierStatus::Pass => "pass",
            TierStatus::Fail => "fail",
            TierStatus::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierResult {
    pub tier: u8,
    pub status: TierStatus,
    pub metrics: BTreeMap<String, f64>,
    /// Workspace-relative.
    pub log_path: String,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone)]
pub struct TierSpec {
    pub tier: u8,
    pub command: String,
    /// `None` means unlimited.
    pub budget_s: Option<u64>,
    pub metric_parsers: Vec<(String, Regex)>,
}

fn default_pattern(name: &str) -> Regex {
    Regex::new(&format!(r"^{}=(\S+)", regex::escape(name))).expect("escaped pattern")
}

impl TierSpec {
    /// Spec for `tier` from the manifest. Tier 3 parses every manifest metric,
    /// whether or not the tier declares it.
    pub fn from_manifest(m: &ProjectManifest, tier: u8) -> Result<TierSpec> {
        let cmd = m
            .tier_command(tier)
            .ok_or_else(|| Error::NotFound(format!("no command declared for tier {tier} in harness-manifest")))?;
        let mut parsers: Vec<(String, Regex)> = Vec::new();
        for p in &cmd.metrics {
            let re = match &p.pattern {
                Some(pat) => Regex::new(pat).map_err(|e| Error::Invalid(format!("metric pattern `{pat}`: {e}")))?,
                None => default_pattern(&p.name),
            };
            parsers.push((p.name.clone(), re));
        }
        if tier == 3 {
            for name in &m.metric_names {
                if !parsers.iter().any(|(n, _)| n == name) {
                    parsers.push((name.clone(), default_pattern(name)));
                }
            }
        }
        Ok(TierSpec {
            tier,
            command: cmd.command.clone(),
            budget_s: m.tier_budgets.for_tier(tier),
            metric_parsers: parsers,
        })
    }
}

/// Metrics found in `lines`, last match winning. Values must be finite.
pub fn extract_metrics(lines: &[&str], parsers: &[(String, Regex)]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for line in lines {
        for (name, re) in parsers {
            let Some(caps) = re.captures(line) else { continue };
            let Some(raw) = caps.get(1) else { continue };
            let raw = raw.as_str();
            if scan_number(raw.as_bytes()) != Some(raw.len()) {
                continue;
            }
            if let Ok(v) = raw.parse::<f64>() {
                if v.is_finite() {
                    out.insert(name.clone(), v);
                }
            }
        }
    }
    out
}

/// Violation when `tier` would be recorded without every lower tier passing.
pub fn gate_violation(subject: &str, latest: &BTreeMap<u8, TierStatus>, tier: u8) -> Option<Violation> {
    let missing: Vec<String> = (1..tier)
        .filter(|t| latest.get(t) != Some(&TierStatus::Pass))
        .map(|t| match latest.get(&t) {
            Some(s) => format!("tier {t} is {}", s.as_str()),
            None => format!("tier {t} has no result"),
        })
        .collect();
    if missing.is_empty() {
        return None;
    }
    Some(Violation::new(
        RuleId::TierOrder,
        Severity::Block,
        subject,
        format!("tier {tier} requires passing results for all lower tiers ({})", missing.join(", ")),
    ))
}

/// One persisted tier run. The gate looks at the latest attempt per tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub attempt: u32,
    pub result: TierResult,
}

pub fn experiment_dir(ws: &Workspace, id: ExperimentId) -> std::path::PathBuf {
    ws.logs_dir().join(id.to_string())
}

pub fn attempts(ws: &Workspace, id: ExperimentId) -> Result<Vec<Attempt>> {
    let path = experiment_dir(ws, id).join("attempts.jsonl");
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Latest result per tier.
pub fn latest_results(ws: &Workspace, id: ExperimentId) -> Result<BTreeMap<u8, TierResult>> {
    let mut out = BTreeMap::new();
    for a in attempts(ws, id)? {
        out.insert(a.result.tier, a.result);
    }
    Ok(out)
}

pub fn statuses(results: &BTreeMap<u8, TierResult>) -> BTreeMap<u8, TierStatus> {
    results.iter().map(|(t, r)| (*t, r.status)).collect()
}

/// Run one tier for experiment `id`, gated on lower tiers.
pub fn run_tier(ws: &Workspace, id: ExperimentId, spec: &TierSpec) -> Result<TierResult> {
    run_tier_with(ws, id, spec, &SpawnOptions::default())
}

pub fn run_tier_with(ws: &Workspace, id: ExperimentId, spec: &TierSpec, opts: &SpawnOptions) -> Result<TierResult> {
    if !(1..=3).contains(&spec.tier) {
        return Err(Error::Invalid(format!("tier {} is not 1, 2 or 3", spec.tier)));
    }
    let previous = latest_results(ws, id)?;
    if let Some(v) = gate_violation(&id.to_string(), &statuses(&previous), spec.tier) {
        return Err(Error::Violations(vec![v]));
    }
    let ctx = HookContext {
        experiment: Some(id),
        tier: Some(spec.tier),
        ..HookContext::default()
    };
    let blocking = guardrails::blocking(guardrails::run_hooks(ws, Trigger::ExperimentRun, &ctx)?);
    if !blocking.is_empty() {
        return Err(Error::Violations(blocking));
    }

    let rel_log = format!("logs/{id}/tier{}.log", spec.tier);
    let log = ws.root().join(&rel_log);
    let offset = fs::metadata(&log).map(|m| m.len()).unwrap_or(0);
    let policy = SandboxPolicy::for_workspace(ws.root(), &ws.manifest().sandbox);
    let mut opts = opts.clone();
    opts.registry.get_or_insert_with(|| ws.logs_dir().join("processes"));
    opts.env.push(("EXH_EXPERIMENT".into(), id.to_string()));
    opts.env.push(("EXH_TIER".into(), spec.tier.to_string()));
    let proc = supervisor::spawn_with(&policy, &spec.command, Path::new(&rel_log), &opts)?;
    let state = proc.wait_timeout(spec.budget_s.map(Duration::from_secs), Duration::from_millis(20))?;
    let wall = proc.elapsed().as_secs_f64();

    let tail = supervisor::tail(&log, METRIC_WINDOW + 2)?;
    let total = fs::metadata(&log).at(&log)?.len();
    let tail_start = total - tail.len() as u64;
    let own = if tail_start < offset {
        tail.get((offset - tail_start) as usize..).unwrap_or("")
    } else {
        &tail
    };
    let lines: Vec<&str> = own.lines().collect();
    let lines = &lines[lines.len().saturating_sub(METRIC_WINDOW + 1)..];
    let metrics = extract_metrics(lines, &spec.metric_parsers);

    let status = match state {
        ProcessState::Exited(0) => {
            let missing: Vec<&str> = spec
                .metric_parsers
                .iter()
                .map(|(n, _)| n.as_str())
                .filter(|n| spec.tier == 3 && !metrics.contains_key(*n))
                .collect();
            if missing.is_empty() {
                TierStatus::Pass
            } else {
                append_line(
                    &log,
                    &format!(
                        "[harness] tier 3 exited 0 but no `name=value` line was found for: {}",
                        missing.join(", ")
                    ),
                )?;
                TierStatus::Fail
            }
        }
        ProcessState::Killed(KillReason::Timeout) => TierStatus::Timeout,
        _ => TierStatus::Fail,
    };
    let result = TierResult {
        tier: spec.tier,
        status,
        metrics,
        log_path: rel_log,
        wall_clock_s: wall,
    };
    let n = attempts(ws, id)?.len() as u32 + 1;
    append_line(
        &experiment_dir(ws, id).join("attempts.jsonl"),
        &serde_json::to_string(&Attempt { attempt: n, result: result.clone() }).expect("serializes"),
    )?;
    Ok(result)
}

/// Metrics eligible for the commit subject and report: exactly the tier-3
/// map, and only when tier 3 passed.
pub fn promote(results: &BTreeMap<u8, TierResult>) -> Result<BTreeMap<String, f64>> {
    match results.get(&3) {
        Some(r) if r.status == TierStatus::Pass => Ok(r.metrics.clone()),
        Some(r) => Err(Error::Invalid(format!(
            "tier 3 is {}; only a passing tier-3 run produces reportable metrics",
            r.status.as_str()
        ))),
        None => Err(Error::Invalid(
            "no tier-3 result; only a passing tier-3 run produces reportable metrics".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(tier: u8, status: TierStatus, m: &[(&str, f64)]) -> TierResult {
        TierResult {
            tier,
            status,
            metrics: m.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            log_path: format!("logs/E001/tier{tier}.log"),
            wall_clock_s: 1.0,
        }
    }

    #[test]
    fn promote_returns_tier3_only() {
        let mut r = BTreeMap::new();
        r.insert(1, result(1, TierStatus::Pass, &[("val_ppl", 99.0)]));
        r.insert(2, result(2, TierStatus::Pass, &[("val_ppl", 40.0)]));
        assert!(promote(&r).is_err());
        r.insert(3, result(3, TierStatus::Pass, &[("val_ppl", 22.1)]));
        let p = promote(&r).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p["val_ppl"], 22.1);
        r.insert(3, result(3, TierStatus::Fail, &[]));
        assert!(promote(&r).is_err());
    }

    #[test]
    fn extraction_is_line_anchored() {
        let parsers = vec![("loss".to_string(), default_pattern("loss")), ("acc".to_string(), default_pattern("acc"))];
        let lines = ["step 1 loss=9", "loss=2.5", "loss=1.5e-1", "acc=nan", "acc=0.9x", "acc=0.91"];
        let m = extract_metrics(&lines, &parsers);
        assert_eq!(m["loss"], 0.15);
        assert_eq!(m["acc"], 0.91);
    }

    #[test]
    fn gate() {
        let mut s = BTreeMap::new();
        assert!(gate_violation("E1", &s, 1).is_none());
        assert!(gate_violation("E1", &s, 2).is_some());
        s.insert(1, TierStatus::Pass);
        assert!(gate_violation("E1", &s, 2).is_none());
        s.insert(2, TierStatus::Timeout);
        let v = gate_violation("E1", &s, 3).unwrap();
        assert!(v.detail.contains("Commandment VII"));
    }
}

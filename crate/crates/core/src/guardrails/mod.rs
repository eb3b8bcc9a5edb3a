//! Machine-checkable rules run after file edits, before experiment runs, at
//! commit time and at session start.

mod hooks;
mod protected;
mod variables;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use hooks::{blocking, evaluate_rules, load_hooks, parse_hooks, run_hooks, HookAction, HookEntry, HOOKS_FILE, HOOK_LOG};
pub use protected::{
    check_protected, current_digest, evaluate_protected, read_lockfile, render_lockfile, write_lockfile, load_unlock_tokens,
    Rotation, UnlockToken, ABSENT, LOCKFILE, UNLOCK_DIR,
};
pub use variables::{check_one_variable, VariableCheck, VariableManifest};

use crate::error::{Error, Result};
use crate::evaluation::{gate_violation, TierStatus};
use crate::ledger::{ExperimentId, RecordDraft};
use crate::report::ResultRef;
use crate::workspace::SessionState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RuleId {
    OneVariable,
    ProtectedEval,
    TierOrder,
    RecordBeforeIterate,
    CitationStatus,
    ClaimGrades,
    /// Structural validity of `report.tex` and `TODO.md`.
    ReportFields,
    /// External hook command (formatter, test runner).
    HookCommand,
}

impl RuleId {
    pub const ALL: [RuleId; 8] = [
        RuleId::OneVariable,
        RuleId::ProtectedEval,
        RuleId::TierOrder,
        RuleId::RecordBeforeIterate,
        RuleId::CitationStatus,
        RuleId::ClaimGrades,
        RuleId::ReportFields,
        RuleId::HookCommand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleId::OneVariable => "ONE_VARIABLE",
            RuleId::ProtectedEval => "PROTECTED_EVAL",
            RuleId::TierOrder => "TIER_ORDER",
            RuleId::RecordBeforeIterate => "RECORD_BEFORE_ITERATE",
            RuleId::CitationStatus => "CITATION_STATUS",
            RuleId::ClaimGrades => "CLAIM_GRADES",
            RuleId::ReportFields => "REPORT_FIELDS",
            RuleId::HookCommand => "HOOK_COMMAND",
        }
    }

    /// Roman numeral of the commandment the rule enforces.
    pub fn commandment(self) -> &'static str {
        match self {
            RuleId::OneVariable => "VI",
            RuleId::ProtectedEval => "II",
            RuleId::TierOrder => "VII",
            RuleId::RecordBeforeIterate | RuleId::ReportFields => "IX",
            RuleId::CitationStatus => "III",
            RuleId::ClaimGrades => "X",
            RuleId::HookCommand => "V",
        }
    }

    fn commandment_title(self) -> &'static str {
        match self.commandment() {
            "II" => "Never Manipulate Evaluation",
            "III" => "Never Fabricate Citations",
            "V" => "Make It Work Before Moving On",
            "VI" => "One Variable per Experiment",
            "VII" => "Evaluate in Tiers",
            "IX" => "Record Everything",
            _ => "Verify Before Claiming",
        }
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RuleId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        RuleId::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown rule `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    FileEdit,
    ExperimentRun,
    PreCommit,
    SessionStart,
}

impl Trigger {
    pub const ALL: [Trigger; 4] = [Trigger::FileEdit, Trigger::ExperimentRun, Trigger::PreCommit, Trigger::SessionStart];

    pub fn as_str(self) -> &'static str {
        match self {
            Trigger::FileEdit => "file_edit",
            Trigger::ExperimentRun => "experiment_run",
            Trigger::PreCommit => "pre_commit",
            Trigger::SessionStart => "session_start",
        }
    }
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Trigger {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Trigger::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown trigger `{s}` (expected file_edit, experiment_run, pre_commit or session_start)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Block,
    Warn,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Block => "block",
            Severity::Warn => "warn",
        }
    }
}

impl std::str::FromStr for Severity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(Severity::Block),
            "warn" => Ok(Severity::Warn),
            _ => Err(Error::Invalid(format!("unknown severity `{s}` (expected block or warn)"))),
        }
    }
}

/// A rule with the triggers it runs on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuardrailRule {
    pub id: RuleId,
    pub triggers: &'static [Trigger],
    pub severity: Severity,
}

pub const RULES: [GuardrailRule; 8] = [
    GuardrailRule { id: RuleId::OneVariable, triggers: &[Trigger::PreCommit], severity: Severity::Block },
    GuardrailRule { id: RuleId::ProtectedEval, triggers: &[Trigger::FileEdit, Trigger::PreCommit], severity: Severity::Block },
    GuardrailRule { id: RuleId::TierOrder, triggers: &[Trigger::ExperimentRun, Trigger::PreCommit], severity: Severity::Block },
    GuardrailRule { id: RuleId::RecordBeforeIterate, triggers: &[Trigger::SessionStart], severity: Severity::Block },
    GuardrailRule { id: RuleId::CitationStatus, triggers: &[Trigger::PreCommit, Trigger::SessionStart], severity: Severity::Warn },
    GuardrailRule { id: RuleId::ClaimGrades, triggers: &[Trigger::FileEdit, Trigger::PreCommit], severity: Severity::Block },
    GuardrailRule { id: RuleId::ReportFields, triggers: &[Trigger::FileEdit, Trigger::PreCommit], severity: Severity::Block },
    GuardrailRule { id: RuleId::HookCommand, triggers: &[Trigger::FileEdit, Trigger::ExperimentRun, Trigger::PreCommit, Trigger::SessionStart], severity: Severity::Block },
];

/// One enforcement finding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub rule: RuleId,
    /// Path, experiment ID or claim the finding is about.
    pub subject: String,
    /// Always names the commandment, e.g. "... (Commandment VI: One Variable per Experiment)".
    pub detail: String,
    pub severity: Severity,
}

impl Violation {
    pub fn new(rule: RuleId, severity: Severity, subject: impl Into<String>, detail: impl Into<String>) -> Self {
        let mut detail = detail.into();
        let tag = format!("Commandment {}", rule.commandment());
        if !detail.contains(&format!("{tag}:")) && !detail.ends_with(&tag) {
            detail = format!("{detail} ({tag}: {})", rule.commandment_title());
        }
        Violation {
            rule,
            subject: subject.into(),
            detail,
            severity,
        }
    }

    pub fn with_severity(mut self, severity: Severity) -> Self {
        self.severity = severity;
        self
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}: {}", self.severity.as_str(), self.rule, self.subject, self.detail)
    }
}

/// What a hook run is about.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookContext {
    /// Workspace-relative paths changed by the triggering edit.
    pub touched: Vec<String>,
    pub experiment: Option<ExperimentId>,
    pub draft: Option<RecordDraft>,
    /// Tier about to run, for `experiment_run`.
    pub tier: Option<u8>,
}

/// Tier results must form a passing prefix, and report Results may only cite
/// tier 3.
pub fn check_tier_order(subject: &str, tiers: &BTreeMap<u8, TierStatus>, results_refs: &[ResultRef]) -> Vec<Violation> {
    let mut out = Vec::new();
    for &tier in tiers.keys() {
        if !(1..=3).contains(&tier) {
            out.push(Violation::new(RuleId::TierOrder, Severity::Block, subject, format!("tier {tier} does not exist")));
        } else if let Some(v) = gate_violation(subject, tiers, tier) {
            out.push(v);
        }
    }
    for r in results_refs.iter().filter(|r| r.tier != 3) {
        out.push(Violation::new(
            RuleId::TierOrder,
            Severity::Block,
            subject,
            format!("Results cite tier {} for `{}`; only tier-3 runs may back conclusions", r.tier, r.metric),
        ));
    }
    out
}

/// The most recent experiment must have both a report section and a ledger
/// commit before another one begins.
pub fn record_gap(committed: &BTreeSet<ExperimentId>, recorded: &BTreeSet<ExperimentId>) -> Option<Violation> {
    let last = committed.iter().chain(recorded.iter()).max()?;
    let missing = match (committed.contains(last), recorded.contains(last)) {
        (true, true) => return None,
        (true, false) => "its report.tex subsection",
        (false, true) => "its ledger commit",
        (false, false) => unreachable!(),
    };
    Some(Violation::new(
        RuleId::RecordBeforeIterate,
        Severity::Block,
        last.to_string(),
        format!("{last} is missing {missing}; record it before starting the next experiment"),
    ))
}

pub fn check_record_before_iterate(state: &SessionState) -> Option<Violation> {
    let committed = state.experiments.iter().map(|r| r.id).collect();
    let recorded = state.recorded_sections.iter().copied().collect();
    record_gap(&committed, &recorded)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_detail_names_its_commandment() {
        for rule in RuleId::ALL {
            let v = Violation::new(rule, Severity::Block, "x", "something");
            assert!(v.detail.contains(&format!("Commandment {}", rule.commandment())), "{v}");
        }
    }

    #[test]
    fn tier_order_cases() {
        let t = |pairs: &[(u8, TierStatus)]| pairs.iter().copied().collect::<BTreeMap<_, _>>();
        use TierStatus::*;
        assert!(check_tier_order("E1", &t(&[(1, Pass), (2, Pass), (3, Pass)]), &[]).is_empty());
        assert!(!check_tier_order("E1", &t(&[(3, Pass)]), &[]).is_empty());
        assert!(!check_tier_order("E1", &t(&[(1, Pass), (2, Fail), (3, Pass)]), &[]).is_empty());
        assert!(check_tier_order("E1", &t(&[(1, Fail)]), &[]).is_empty());
        let small = ResultRef { tier: 2, metric: "loss".into(), value: 1.0 };
        assert!(!check_tier_order("E1", &t(&[]), &[small]).is_empty());
    }

    #[test]
    fn record_gap_cases() {
        let ids = |ns: &[u32]| ns.iter().map(|n| ExperimentId::new(*n).unwrap()).collect::<BTreeSet<_>>();
        assert!(record_gap(&ids(&[]), &ids(&[])).is_none());
        assert!(record_gap(&ids(&[1, 2]), &ids(&[1, 2])).is_none());
        let v = record_gap(&ids(&[1, 2]), &ids(&[1])).unwrap();
        assert!(v.detail.contains("Commandment IX"));
        assert_eq!(v.subject, "E002");
        assert!(record_gap(&ids(&[1]), &ids(&[1, 2])).is_some());
    }
}

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ReportError, ReportErrors};
use crate::error::{Error, IoContext, Result};
use crate::fsutil::atomic_write;
use crate::ledger::ExperimentId;

pub const REPORT_FILE: &str = "report.tex";
pub const REGION_BEGIN: &str = "% ==== EXPERIMENTS BEGIN ====";
pub const REGION_END: &str = "% ==== EXPERIMENTS END ====";

const SUBSECTION: &str = "\\subsection{";
const PARAGRAPH: &str = "\\paragraph{";
const CLAIM: &str = "%% claim[";
const RESULT: &str = "%% result[";

/// The seven required fields of an experiment subsection, in document order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Field {
    Goal,
    Hypothesis,
    Method,
    Implementation,
    Results,
    Analysis,
    NextSteps,
}

impl Field {
    pub const ALL: [Field; 7] = [
        Field::Goal,
        Field::Hypothesis,
        Field::Method,
        Field::Implementation,
        Field::Results,
        Field::Analysis,
        Field::NextSteps,
    ];

    pub fn heading(self) -> &'static str {
        match self {
            Field::Goal => "Goal",
            Field::Hypothesis => "Hypothesis",
            Field::Method => "Method",
            Field::Implementation => "Implementation",
            Field::Results => "Results",
            Field::Analysis => "Analysis",
            Field::NextSteps => "Next Steps",
        }
    }

    pub fn from_heading(s: &str) -> Option<Field> {
        Field::ALL.into_iter().find(|f| f.heading() == s)
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.heading())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Verified,
    PartiallyVerified,
    Unverified,
}

impl Grade {
    pub fn as_str(self) -> &'static str {
        match self {
            Grade::Verified => "verified",
            Grade::PartiallyVerified => "partially_verified",
            Grade::Unverified => "unverified",
        }
    }
}

impl std::str::FromStr for Grade {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verified" => Ok(Grade::Verified),
            "partially_verified" => Ok(Grade::PartiallyVerified),
            "unverified" => Ok(Grade::Unverified),
            other => Err(Error::Invalid(format!(
                "unknown grade `{other}` (expected verified, partially_verified or unverified)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceStatus {
    Pass,
    Fail,
}

/// A verification script and the outcome of its last run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub script: String,
    pub status: EvidenceStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub text: String,
    pub grade: Grade,
    pub evidence: Option<Evidence>,
}

impl Claim {
    pub fn unverified(text: impl Into<String>) -> Self {
        Claim {
            text: text.into(),
            grade: Grade::Unverified,
            evidence: None,
        }
    }

    pub fn is_sound(&self) -> bool {
        self.grade != Grade::Verified
            || matches!(&self.evidence, Some(e) if e.status == EvidenceStatus::Pass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRef {
    pub tier: u8,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub id: ExperimentId,
    pub title: String,
    pub fields: BTreeMap<Field, String>,
    pub claims: Vec<Claim>,
    pub results_refs: Vec<ResultRef>,
}

impl ExperimentSection {
    /// Section with all seven fields set from `bodies` in canonical order.
    pub fn new(id: ExperimentId, title: impl Into<String>, bodies: [&str; 7]) -> Self {
        ExperimentSection {
            id,
            title: title.into(),
            fields: Field::ALL
                .into_iter()
                .zip(bodies)
                .map(|(f, b)| (f, b.to_string()))
                .collect(),
            claims: Vec::new(),
            results_refs: Vec::new(),
        }
    }

    pub fn field(&self, field: Field) -> Option<&str> {
        self.fields.get(&field).map(String::as_str)
    }

    /// Field-level problems; empty for a valid section.
    pub fn validate(&self) -> Vec<ReportError> {
        let mut errors = Vec::new();
        if self.title.trim().is_empty() || self.title.contains('\n') || self.title != self.title.trim() {
            errors.push(ReportError::EmptyTitle { id: self.id, line: 0 });
        }
        for field in Field::ALL {
            match self.fields.get(&field) {
                None => errors.push(ReportError::MissingField {
                    id: self.id,
                    field,
                    line: 0,
                }),
                Some(body) if body.trim().is_empty() => errors.push(ReportError::EmptyField {
                    id: self.id,
                    field,
                    line: 0,
                }),
                Some(body) => {
                    if body != body.trim() {
                        errors.push(ReportError::InvalidBody {
                            id: self.id,
                            field,
                            reason: "leading or trailing whitespace".into(),
                        });
                    }
                    if let Some(bad) = body.lines().find(|l| is_structural(l)) {
                        errors.push(ReportError::InvalidBody {
                            id: self.id,
                            field,
                            reason: format!("line `{bad}` would start a new element"),
                        });
                    }
                }
            }
        }
        for (i, claim) in self.claims.iter().enumerate() {
            if claim.text.trim().is_empty() || claim.text.contains('\n') {
                errors.push(ReportError::MalformedAnnotation {
                    line: 0,
                    text: format!("claim {i} text"),
                });
            }
            if let Some(e) = &claim.evidence {
                if e.script.is_empty() || e.script.contains([',', ']', ' ', '\n']) {
                    errors.push(ReportError::MalformedAnnotation {
                        line: 0,
                        text: format!("claim {i} evidence path `{}`", e.script),
                    });
                }
            }
            if !claim.is_sound() {
                errors.push(ReportError::UnsupportedClaim {
                    id: self.id,
                    claim: i,
                    line: 0,
                });
            }
        }
        for r in &self.results_refs {
            if r.tier != 3 {
                errors.push(ReportError::SmallScaleResult {
                    id: self.id,
                    tier: r.tier,
                    line: 0,
                });
            }
            if !crate::ledger::is_metric_name(&r.metric) || !r.value.is_finite() {
                errors.push(ReportError::MalformedAnnotation {
                    line: 0,
                    text: format!("result {}={}", r.metric, r.value),
                });
            }
        }
        errors
    }
}

fn is_structural(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with(SUBSECTION)
        || t.starts_with(CLAIM)
        || t.starts_with(RESULT)
        || t.starts_with(REGION_BEGIN)
        || t.starts_with(REGION_END)
        || t.strip_prefix(PARAGRAPH)
            .and_then(|rest| rest.split_once('}'))
            .is_some_and(|(name, _)| Field::from_heading(name).is_some())
}

pub fn render_section(section: &ExperimentSection) -> String {
    let mut out = format!("{SUBSECTION}{}: {}}}\n", section.id, section.title);
    for field in Field::ALL {
        let body = section.fields.get(&field).map(String::as_str).unwrap_or("");
        out.push_str(&format!("{PARAGRAPH}{}}} {}\n", field.heading(), body));
    }
    for claim in &section.claims {
        out.push_str(&render_claim(claim));
        out.push('\n');
    }
    for r in &section.results_refs {
        out.push_str(&format!("{RESULT}tier={}] {}={}\n", r.tier, r.metric, r.value));
    }
    out
}

fn render_claim(claim: &Claim) -> String {
    let mut attrs = format!("grade={}", claim.grade.as_str());
    if let Some(e) = &claim.evidence {
        let status = match e.status {
            EvidenceStatus::Pass => "pass",
            EvidenceStatus::Fail => "fail",
        };
        attrs.push_str(&format!(",evidence={},status={status}", e.script));
    }
    format!("{CLAIM}{attrs}] {}", claim.text)
}

/// 1-based inclusive line range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClaimLocation {
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportDocument {
    text: String,
    pub sections: Vec<ExperimentSection>,
    pub spans: Vec<LineSpan>,
    claim_lines: Vec<Vec<usize>>,
    end_marker_line: usize,
}

impl ReportDocument {
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn section(&self, id: ExperimentId) -> Option<&ExperimentSection> {
        self.sections.iter().find(|s| s.id == id)
    }

    pub fn ids(&self) -> Vec<ExperimentId> {
        self.sections.iter().map(|s| s.id).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Ok(parse_report(&text)?)
    }
}

fn parse_heading(line: &str) -> Option<(ExperimentId, String)> {
    let inner = line.trim().strip_prefix(SUBSECTION)?.strip_suffix('}')?;
    let (id, title) = inner.split_once(':')?;
    let id = id.trim().parse().ok()?;
    Some((id, title.trim().to_string()))
}

fn parse_attrs(s: &str) -> Option<BTreeMap<&str, &str>> {
    s.split(',')
        .map(|kv| kv.split_once('=').map(|(k, v)| (k.trim(), v.trim())))
        .collect()
}

fn parse_claim(line: &str) -> Option<Claim> {
    let rest = line.trim().strip_prefix(CLAIM)?;
    let (attrs, text) = rest.split_once(']')?;
    let attrs = parse_attrs(attrs)?;
    let grade = attrs.get("grade")?.parse().ok()?;
    let evidence = match (attrs.get("evidence"), attrs.get("status")) {
        (Some(script), Some(status)) => Some(Evidence {
            script: script.to_string(),
            status: match *status {
                "pass" => EvidenceStatus::Pass,
                "fail" => EvidenceStatus::Fail,
                _ => return None,
            },
        }),
        (None, None) => None,
        _ => return None,
    };
    if attrs.keys().any(|k| !matches!(*k, "grade" | "evidence" | "status")) {
        return None;
    }
    let text = text.trim();
    (!text.is_empty()).then(|| Claim {
        text: text.to_string(),
        grade,
        evidence,
    })
}

fn parse_result(line: &str) -> Option<ResultRef> {
    let rest = line.trim().strip_prefix(RESULT)?;
    let (attrs, body) = rest.split_once(']')?;
    let attrs = parse_attrs(attrs)?;
    let tier: u8 = attrs.get("tier")?.parse().ok()?;
    let (metric, value) = body.trim().split_once('=')?;
    let value: f64 = value.trim().parse().ok()?;
    Some(ResultRef {
        tier,
        metric: metric.trim().to_string(),
        value,
    })
}

struct Builder {
    id: ExperimentId,
    title: String,
    start: usize,
    fields: BTreeMap<Field, (usize, Vec<String>)>,
    current: Option<Field>,
    claims: Vec<Claim>,
    claim_lines: Vec<usize>,
    results: Vec<(usize, ResultRef)>,
}

impl Builder {
    fn finish(self, end: usize, errors: &mut Vec<ReportError>) -> (ExperimentSection, LineSpan, Vec<usize>) {
        let mut fields = BTreeMap::new();
        for field in Field::ALL {
            match self.fields.get(&field) {
                None => errors.push(ReportError::MissingField {
                    id: self.id,
                    field,
                    line: self.start,
                }),
                Some((line, body)) => {
                    let body = body.join("\n").trim().to_string();
                    if body.is_empty() {
                        errors.push(ReportError::EmptyField {
                            id: self.id,
                            field,
                            line: *line,
                        });
                    }
                    fields.insert(field, body);
                }
            }
        }
        if self.title.is_empty() {
            errors.push(ReportError::EmptyTitle {
                id: self.id,
                line: self.start,
            });
        }
        for (i, (claim, line)) in self.claims.iter().zip(&self.claim_lines).enumerate() {
            if !claim.is_sound() {
                errors.push(ReportError::UnsupportedClaim {
                    id: self.id,
                    claim: i,
                    line: *line,
                });
            }
        }
        for (line, r) in &self.results {
            if r.tier != 3 {
                errors.push(ReportError::SmallScaleResult {
                    id: self.id,
                    tier: r.tier,
                    line: *line,
                });
            }
        }
        (
            ExperimentSection {
                id: self.id,
                title: self.title,
                fields,
                claims: self.claims,
                results_refs: self.results.into_iter().map(|(_, r)| r).collect(),
            },
            LineSpan {
                start: self.start,
                end,
            },
            self.claim_lines,
        )
    }
}

/// Parse `report.tex` text. Every problem is reported; a document is only
/// returned when there are none.
pub fn parse_report(text: &str) -> std::result::Result<ReportDocument, ReportErrors> {
    let lines: Vec<&str> = text.lines().collect();
    let find = |marker: &str| {
        let hits: Vec<usize> = lines
            .iter()
            .enumerate()
            .filter(|(_, l)| l.trim_end() == marker)
            .map(|(i, _)| i)
            .collect();
        (hits.len() == 1).then(|| hits[0])
    };
    let (begin, end) = match (find(REGION_BEGIN), find(REGION_END)) {
        (Some(b), Some(e)) if b < e => (b, e),
        _ => return Err(ReportErrors(vec![ReportError::MissingMarkers])),
    };

    let mut errors = Vec::new();
    let mut sections = Vec::new();
    let mut spans: Vec<LineSpan> = Vec::new();
    let mut claim_lines = Vec::new();
    let mut current: Option<Builder> = None;

    let mut close = |b: Option<Builder>, end_line: usize, errors: &mut Vec<ReportError>| {
        if let Some(b) = b {
            let (s, span, cl) = b.finish(end_line, errors);
            sections.push(s);
            spans.push(span);
            claim_lines.push(cl);
        }
    };

    for (idx, raw) in lines.iter().enumerate().take(end).skip(begin + 1) {
        let lineno = idx + 1;
        let trimmed = raw.trim();
        if trimmed.starts_with(SUBSECTION) {
            close(current.take(), lineno - 1, &mut errors);
            match parse_heading(trimmed) {
                Some((id, title)) => {
                    current = Some(Builder {
                        id,
                        title,
                        start: lineno,
                        fields: BTreeMap::new(),
                        current: None,
                        claims: Vec::new(),
                        claim_lines: Vec::new(),
                        results: Vec::new(),
                    })
                }
                None => errors.push(ReportError::MalformedHeading {
                    line: lineno,
                    text: trimmed.to_string(),
                }),
            }
            continue;
        }
        let Some(b) = current.as_mut() else {
            continue;
        };
        if trimmed.starts_with(CLAIM) {
            match parse_claim(trimmed) {
                Some(c) => {
                    b.claims.push(c);
                    b.claim_lines.push(lineno);
                }
                None => errors.push(ReportError::MalformedAnnotation {
                    line: lineno,
                    text: trimmed.to_string(),
                }),
            }
            continue;
        }
        if trimmed.starts_with(RESULT) {
            match parse_result(trimmed) {
                Some(r) => b.results.push((lineno, r)),
                None => errors.push(ReportError::MalformedAnnotation {
                    line: lineno,
                    text: trimmed.to_string(),
                }),
            }
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix(PARAGRAPH) {
            if let Some((name, after)) = rest.split_once('}') {
                if let Some(field) = Field::from_heading(name) {
                    if b.fields.contains_key(&field) {
                        errors.push(ReportError::DuplicateField {
                            id: b.id,
                            field,
                            line: lineno,
                        });
                    }
                    b.fields.insert(field, (lineno, vec![after.trim_start().to_string()]));
                    b.current = Some(field);
                    continue;
                }
            }
        }
        if let Some(field) = b.current {
            if let Some((_, body)) = b.fields.get_mut(&field) {
                body.push(raw.to_string());
            }
        }
    }
    close(current.take(), end, &mut errors);

    let mut first_seen: BTreeMap<ExperimentId, usize> = BTreeMap::new();
    for (s, span) in sections.iter().zip(&spans) {
        if let Some(first) = first_seen.get(&s.id) {
            errors.push(ReportError::DuplicateSection {
                id: s.id,
                line: span.start,
                first_line: *first,
            });
        } else {
            first_seen.insert(s.id, span.start);
        }
    }

    if !errors.is_empty() {
        return Err(ReportErrors(errors));
    }
    Ok(ReportDocument {
        text: text.to_string(),
        sections,
        spans,
        claim_lines,
        end_marker_line: end + 1,
    })
}

/// Insert `section` at the end of the experiment region. The returned
/// document re-parses to the old sections followed by the new one.
pub fn append_section(
    doc: &ReportDocument,
    section: &ExperimentSection,
) -> std::result::Result<ReportDocument, ReportErrors> {
    let mut errors = section.validate();
    if let Some(i) = doc.sections.iter().position(|s| s.id == section.id) {
        errors.push(ReportError::DuplicateSection {
            id: section.id,
            line: doc.end_marker_line,
            first_line: doc.spans[i].start,
        });
    }
    if !errors.is_empty() {
        return Err(ReportErrors(errors));
    }
    let mut out = String::with_capacity(doc.text.len() + 512);
    for (i, line) in doc.text.lines().enumerate() {
        if i + 1 == doc.end_marker_line {
            out.push_str(&render_section(section));
            out.push('\n');
        }
        out.push_str(line);
        out.push('\n');
    }
    let new = parse_report(&out)?;
    debug_assert_eq!(new.sections.len(), doc.sections.len() + 1);
    debug_assert_eq!(new.sections.last(), Some(section));
    Ok(new)
}

/// Change the grade of one claim. Downgrades are always allowed; `verified`
/// requires evidence whose last run passed.
pub fn grade_claim(
    doc: &ReportDocument,
    id: ExperimentId,
    claim_index: usize,
    grade: Grade,
    evidence: Option<Evidence>,
) -> Result<ReportDocument> {
    let pos = doc
        .sections
        .iter()
        .position(|s| s.id == id)
        .ok_or_else(|| Error::NotFound(format!("no section {id} in report.tex")))?;
    let old = doc.sections[pos].claims.get(claim_index).ok_or_else(|| {
        Error::NotFound(format!(
            "{id} has {} claim(s); index {claim_index} does not exist",
            doc.sections[pos].claims.len()
        ))
    })?;
    let evidence = evidence.or_else(|| old.evidence.clone());
    let claim = Claim {
        text: old.text.clone(),
        grade,
        evidence,
    };
    if !claim.is_sound() {
        return Err(Error::Violations(vec![crate::guardrails::Violation::new(
            crate::guardrails::RuleId::ClaimGrades,
            crate::guardrails::Severity::Block,
            format!("{id} claim {claim_index}"),
            "cannot grade a claim verified without a verification script whose last run passed",
        )]));
    }
    let target = doc.claim_lines[pos][claim_index];
    let mut out = String::with_capacity(doc.text.len());
    for (i, line) in doc.text.lines().enumerate() {
        if i + 1 == target {
            let indent = &line[..line.len() - line.trim_start().len()];
            out.push_str(indent);
            out.push_str(&render_claim(&claim));
        } else {
            out.push_str(line);
        }
        out.push('\n');
    }
    Ok(parse_report(&out)?)
}

/// Write a document back to disk atomically.
pub(crate) fn write_report(path: &Path, doc: &ReportDocument) -> Result<()> {
    atomic_write(path, doc.text.as_bytes())
}

impl ReportDocument {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_report(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(n: u32) -> ExperimentId {
        ExperimentId::new(n).unwrap()
    }

    const FIXTURE: &str = "\\documentclass{article}
\\begin{document}
% ==== EXPERIMENTS BEGIN ====
\\subsection{E001: Muon baseline}
\\paragraph{Goal} What problem are we solving?
\\paragraph{Hypothesis} Why should this approach work?
\\paragraph{Method} Mathematical formulation with proper notation.
\\paragraph{Implementation} Files and lines changed.
\\paragraph{Results} Table with method, model/instance, metric, delta.
\\paragraph{Analysis} Why it worked or didn't. What it reveals.
\\paragraph{Next Steps} What to try based on these results.
%% claim[grade=unverified] Muon converges faster
%% result[tier=3] val_ppl=23.4
% ==== EXPERIMENTS END ====
\\end{document}
";

    #[test]
    fn parses_seven_field_fixture() {
        let doc = parse_report(FIXTURE).unwrap();
        assert_eq!(doc.sections.len(), 1);
        let s = &doc.sections[0];
        assert_eq!(s.id, id(1));
        assert_eq!(s.title, "Muon baseline");
        assert_eq!(s.field(Field::NextSteps), Some("What to try based on these results."));
        assert_eq!(s.claims, vec![Claim::unverified("Muon converges faster")]);
        assert_eq!(s.results_refs[0].metric, "val_ppl");
        assert_eq!(doc.spans[0], LineSpan { start: 4, end: 13 });
    }

    #[test]
    fn missing_hypothesis_is_named() {
        let text = FIXTURE.replace("\\paragraph{Hypothesis} Why should this approach work?\n", "");
        let err = parse_report(&text).unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert!(err.to_string().contains("E001 missing Hypothesis"), "{err}");
    }

    #[test]
    fn multiline_bodies() {
        let text = FIXTURE.replace(
            "\\paragraph{Results} Table with method, model/instance, metric, delta.",
            "\\paragraph{Results}\n\\begin{tabular}{ll}\nA & B \\\\\n\\end{tabular}",
        );
        let doc = parse_report(&text).unwrap();
        assert_eq!(
            doc.sections[0].field(Field::Results).unwrap(),
            "\\begin{tabular}{ll}\nA & B \\\\\n\\end{tabular}"
        );
    }

    #[test]
    fn duplicate_ids_rejected() {
        let section = &FIXTURE[FIXTURE.find("\\subsection").unwrap()..FIXTURE.find(REGION_END).unwrap()];
        let text = FIXTURE.replace(REGION_END, &format!("{section}{REGION_END}"));
        let err = parse_report(&text).unwrap_err();
        assert!(matches!(err.0[0], ReportError::DuplicateSection { .. }), "{err}");
    }

    #[test]
    fn small_scale_results_rejected() {
        let text = FIXTURE.replace("result[tier=3]", "result[tier=2]");
        let err = parse_report(&text).unwrap_err();
        assert!(matches!(err.0[0], ReportError::SmallScaleResult { tier: 2, .. }));
    }

    #[test]
    fn verified_claim_needs_passing_evidence() {
        let text = FIXTURE.replace("grade=unverified", "grade=verified");
        assert!(parse_report(&text).is_err());
        let text = FIXTURE.replace(
            "grade=unverified",
            "grade=verified,evidence=scripts/check.py,status=fail",
        );
        assert!(parse_report(&text).is_err());
        let text = FIXTURE.replace(
            "grade=unverified",
            "grade=verified,evidence=scripts/check.py,status=pass",
        );
        assert!(parse_report(&text).is_ok());
    }

    #[test]
    fn markers_required() {
        let text = FIXTURE.replace(REGION_END, "");
        assert_eq!(parse_report(&text).unwrap_err().0, vec![ReportError::MissingMarkers]);
    }

    fn sample(n: u32) -> ExperimentSection {
        let mut s = ExperimentSection::new(
            id(n),
            format!("experiment {n}"),
            ["goal", "hyp", "method", "impl", "results", "analysis", "next"],
        );
        s.claims.push(Claim::unverified("it helps"));
        s
    }

    #[test]
    fn append_preserves_order() {
        let mut doc = parse_report(FIXTURE).unwrap();
        doc = append_section(&doc, &sample(2)).unwrap();
        doc = append_section(&doc, &sample(3)).unwrap();
        assert_eq!(doc.ids(), vec![id(1), id(2), id(3)]);
        assert_eq!(doc.sections[2], sample(3));
        assert!(doc.text().ends_with("\\end{document}\n"));
    }

    #[test]
    fn append_refuses_empty_analysis_and_duplicates() {
        let doc = parse_report(FIXTURE).unwrap();
        let mut s = sample(2);
        s.fields.insert(Field::Analysis, String::new());
        let err = append_section(&doc, &s).unwrap_err();
        assert!(matches!(err.0[0], ReportError::EmptyField { field: Field::Analysis, .. }));
        let err = append_section(&doc, &sample(1)).unwrap_err();
        assert!(matches!(err.0[0], ReportError::DuplicateSection { .. }));
    }

    #[test]
    fn grading_rules() {
        let doc = append_section(&parse_report(FIXTURE).unwrap(), &sample(4)).unwrap();
        let evidence = Evidence {
            script: "scripts/verify.py".into(),
            status: EvidenceStatus::Pass,
        };
        let err = grade_claim(&doc, id(4), 0, Grade::Verified, None).unwrap_err();
        assert!(err.is_violation());
        let doc = grade_claim(&doc, id(4), 0, Grade::Verified, Some(evidence.clone())).unwrap();
        assert_eq!(doc.section(id(4)).unwrap().claims[0].grade, Grade::Verified);
        let doc = grade_claim(&doc, id(4), 0, Grade::Unverified, None).unwrap();
        let claim = &doc.section(id(4)).unwrap().claims[0];
        assert_eq!(claim.grade, Grade::Unverified);
        assert_eq!(claim.evidence.as_ref(), Some(&evidence));
        assert!(grade_claim(&doc, id(4), 5, Grade::Unverified, None).is_err());
    }
}

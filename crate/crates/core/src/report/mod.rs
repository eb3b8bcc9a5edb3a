//! Structured model of the research artifacts: `report.tex`, `TODO.md` and the
//! bibliography with its verification sidecar.

mod bib;
mod tex;
mod todo;

use std::fmt;

pub use bib::{
    load_bibliography, mark_verified, normalize_title, BibEntry, BibStatus, SourceRecord,
    BIB_FILE, BIB_STATUS_FILE,
};
pub use tex::{
    append_section, grade_claim, parse_report, render_section, Claim, ClaimLocation, Evidence,
    EvidenceStatus, ExperimentSection, Field, Grade, LineSpan, ReportDocument, ResultRef,
    REGION_BEGIN, REGION_END, REPORT_FILE,
};
pub use todo::{TodoEdit, TodoItem, TodoKind, TodoLine, TodoList, TodoState, TODO_FILE};

use crate::ledger::ExperimentId;

/// One problem found in a report or TODO file, with the 1-based line it
/// refers to where one applies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReportError {
    MissingMarkers,
    MalformedHeading { line: usize, text: String },
    DuplicateSection { id: ExperimentId, line: usize, first_line: usize },
    MissingField { id: ExperimentId, field: Field, line: usize },
    EmptyField { id: ExperimentId, field: Field, line: usize },
    DuplicateField { id: ExperimentId, field: Field, line: usize },
    InvalidBody { id: ExperimentId, field: Field, reason: String },
    EmptyTitle { id: ExperimentId, line: usize },
    MalformedAnnotation { line: usize, text: String },
    UnsupportedClaim { id: ExperimentId, claim: usize, line: usize },
    SmallScaleResult { id: ExperimentId, tier: u8, line: usize },
    MalformedTodo { line: usize, text: String },
}

impl fmt::Display for ReportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ReportError::*;
        match self {
            MissingMarkers => write!(
                f,
                "report.tex: experiment region markers `{REGION_BEGIN}` / `{REGION_END}` missing or out of order"
            ),
            MalformedHeading { line, text } => {
                write!(f, "report.tex:{line}: malformed experiment heading `{text}`")
            }
            DuplicateSection { id, line, first_line } => write!(
                f,
                "report.tex:{line}: duplicate section {id} (first defined at line {first_line})"
            ),
            MissingField { id, field, line } => {
                write!(f, "report.tex:{line}: {id} missing {}", field.heading())
            }
            EmptyField { id, field, line } => {
                write!(f, "report.tex:{line}: {id} has an empty {}", field.heading())
            }
            DuplicateField { id, field, line } => {
                write!(f, "report.tex:{line}: {id} repeats {}", field.heading())
            }
            InvalidBody { id, field, reason } => {
                write!(f, "{id} {}: {reason}", field.heading())
            }
            EmptyTitle { id, line } => write!(f, "report.tex:{line}: {id} has no title"),
            MalformedAnnotation { line, text } => {
                write!(f, "report.tex:{line}: malformed annotation `{text}`")
            }
            UnsupportedClaim { id, claim, line } => write!(
                f,
                "report.tex:{line}: {id} claim {claim} is graded verified without passing evidence (Commandment X)"
            ),
            SmallScaleResult { id, tier, line } => write!(
                f,
                "report.tex:{line}: {id} Results cite a tier {tier} run; only tier 3 results may back conclusions (Commandment VII)"
            ),
            MalformedTodo { line, text } => write!(f, "TODO.md:{line}: malformed checklist line `{text}`"),
        }
    }
}

/// All problems found in one artifact. Never empty.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ReportErrors(pub Vec<ReportError>);

impl fmt::Display for ReportErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

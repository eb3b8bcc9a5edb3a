//! Commit subject grammar for experiment commits.
//!
//! ```text
//! msg      := "exp(" id "): " desc " -- " metrics
//! id       := "E" DIGIT{3,}
//! desc     := 1*CHAR, excluding " -- " and newlines
//! metrics  := metric *("," SP metric)
//! metric   := name "=" number
//! name     := ALPHA/"_" *(ALPHA/DIGIT/"_"/".")
//! number   := ["-"] 1*DIGIT ["." 1*DIGIT] [("e"/"E") ["-"/"+"] 1*DIGIT]
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use super::id::ExperimentId;

pub const PREFIX: &str = "exp(";
pub const SEPARATOR: &str = " -- ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    NotExperimentCommit,
    MalformedId,
    MalformedHeader,
    EmptyDescription,
    InvalidDescription,
    MissingSeparator,
    MissingMetrics,
    MalformedMetric,
    NonNumericValue,
    NonFiniteValue,
    DuplicateMetric,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::NotExperimentCommit => "NOT_EXPERIMENT_COMMIT",
            ErrorCode::MalformedId => "MALFORMED_ID",
            ErrorCode::MalformedHeader => "MALFORMED_HEADER",
            ErrorCode::EmptyDescription => "EMPTY_DESCRIPTION",
            ErrorCode::InvalidDescription => "INVALID_DESCRIPTION",
            ErrorCode::MissingSeparator => "MISSING_SEPARATOR",
            ErrorCode::MissingMetrics => "MISSING_METRICS",
            ErrorCode::MalformedMetric => "MALFORMED_METRIC",
            ErrorCode::NonNumericValue => "NON_NUMERIC_VALUE",
            ErrorCode::NonFiniteValue => "NON_FINITE_VALUE",
            ErrorCode::DuplicateMetric => "DUPLICATE_METRIC",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code} at byte {offset}: {detail}")]
pub struct ParseError {
    pub code: ErrorCode,
    pub offset: usize,
    pub detail: String,
}

impl ParseError {
    fn new(code: ErrorCode, offset: usize, detail: impl Into<String>) -> Self {
        ParseError {
            code,
            offset,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

impl Metric {
    pub fn new(name: impl Into<String>, value: f64) -> Self {
        Metric {
            name: name.into(),
            value,
        }
    }
}

/// A validated experiment commit subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitMessage {
    id: ExperimentId,
    description: String,
    metrics: Vec<Metric>,
}

impl CommitMessage {
    pub fn new(
        id: ExperimentId,
        description: impl Into<String>,
        metrics: Vec<Metric>,
    ) -> Result<Self, ParseError> {
        let description = description.into();
        check_description(&description, 0)?;
        if metrics.is_empty() {
            return Err(ParseError::new(
                ErrorCode::MissingMetrics,
                0,
                "at least one metric is required",
            ));
        }
        for (i, m) in metrics.iter().enumerate() {
            if !is_metric_name(&m.name) {
                return Err(ParseError::new(
                    ErrorCode::MalformedMetric,
                    0,
                    format!("invalid metric name `{}`", m.name),
                ));
            }
            if !m.value.is_finite() {
                return Err(ParseError::new(
                    ErrorCode::NonFiniteValue,
                    0,
                    format!("metric `{}` is not finite", m.name),
                ));
            }
            if metrics[..i].iter().any(|o| o.name == m.name) {
                return Err(ParseError::new(
                    ErrorCode::DuplicateMetric,
                    0,
                    format!("metric `{}` listed twice", m.name),
                ));
            }
        }
        Ok(CommitMessage {
            id,
            description,
            metrics,
        })
    }

    pub fn id(&self) -> ExperimentId {
        self.id
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn metrics(&self) -> &[Metric] {
        &self.metrics
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for CommitMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{PREFIX}{}): {}{SEPARATOR}", self.id, self.description)?;
        for (i, m) in self.metrics.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}={}", m.name, m.value)?;
        }
        Ok(())
    }
}

impl std::str::FromStr for CommitMessage {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, ParseError> {
        parse_commit(s)
    }
}

/// True when `subject` claims to be an experiment commit, whether or not it
/// parses. Scans use this to tell plumbing commits from corrupted ledger
/// entries.
pub fn looks_like_experiment(subject: &str) -> bool {
    subject.starts_with(PREFIX)
}

fn check_description(desc: &str, offset: usize) -> Result<(), ParseError> {
    if desc.is_empty() {
        return Err(ParseError::new(
            ErrorCode::EmptyDescription,
            offset,
            "description is empty",
        ));
    }
    if let Some(i) = desc.find(['\n', '\r']) {
        return Err(ParseError::new(
            ErrorCode::InvalidDescription,
            offset + i,
            "description contains a line break",
        ));
    }
    if let Some(i) = desc.find(SEPARATOR) {
        return Err(ParseError::new(
            ErrorCode::InvalidDescription,
            offset + i,
            "description contains the ` -- ` separator",
        ));
    }
    // "x --" followed by the separator would split one token early.
    if desc.ends_with(" --") {
        return Err(ParseError::new(
            ErrorCode::InvalidDescription,
            offset + desc.len() - 3,
            "description may not end with ` --`",
        ));
    }
    Ok(())
}

pub fn is_metric_name(name: &str) -> bool {
    let mut bytes = name.bytes();
    match bytes.next() {
        Some(b) if b.is_ascii_alphabetic() || b == b'_' => {}
        _ => return false,
    }
    bytes.all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'.')
}

/// Length of the longest prefix of `s` matching the `number` production.
pub fn scan_number(s: &[u8]) -> Option<usize> {
    let mut i = 0;
    if s.first() == Some(&b'-') {
        i += 1;
    }
    let digits = |from: usize| s[from..].iter().take_while(|b| b.is_ascii_digit()).count();
    let n = digits(i);
    if n == 0 {
        return None;
    }
    i += n;
    if s.get(i) == Some(&b'.') {
        let n = digits(i + 1);
        if n == 0 {
            return None;
        }
        i += 1 + n;
    }
    if matches!(s.get(i), Some(b'e' | b'E')) {
        let mut j = i + 1;
        if matches!(s.get(j), Some(b'-' | b'+')) {
            j += 1;
        }
        let n = digits(j);
        if n == 0 {
            return None;
        }
        i = j + n;
    }
    Some(i)
}

/// Parse a commit subject strictly against the grammar.
pub fn parse_commit(text: &str) -> Result<CommitMessage, ParseError> {
    use ErrorCode::*;

    if !text.starts_with(PREFIX) {
        return Err(ParseError::new(
            NotExperimentCommit,
            0,
            "subject does not start with `exp(`",
        ));
    }
    let id_start = PREFIX.len();
    let close = text[id_start..]
        .find(')')
        .map(|i| i + id_start)
        .ok_or_else(|| ParseError::new(MalformedId, id_start, "unterminated `exp(`"))?;
    let id: ExperimentId = text[id_start..close]
        .parse()
        .map_err(|e: super::id::BadId| ParseError::new(MalformedId, id_start, e.to_string()))?;
    if !text[close..].starts_with("): ") {
        return Err(ParseError::new(
            MalformedHeader,
            close,
            "expected `): ` after the id",
        ));
    }
    let desc_start = close + 3;
    let sep = text[desc_start..]
        .find(SEPARATOR)
        .map(|i| i + desc_start)
        .ok_or_else(|| ParseError::new(MissingSeparator, text.len(), "missing ` -- ` separator"))?;
    let description = &text[desc_start..sep];
    check_description(description, desc_start)?;

    let mut pos = sep + SEPARATOR.len();
    if pos >= text.len() {
        return Err(ParseError::new(MissingMetrics, pos, "no metrics after separator"));
    }
    let bytes = text.as_bytes();
    let mut metrics: Vec<Metric> = Vec::new();
    loop {
        let name_len = bytes[pos..]
            .iter()
            .take_while(|b| b.is_ascii_alphanumeric() || **b == b'_' || **b == b'.')
            .count();
        let name = &text[pos..pos + name_len];
        if !is_metric_name(name) {
            return Err(ParseError::new(
                MalformedMetric,
                pos,
                "expected metric name",
            ));
        }
        let eq = pos + name_len;
        if bytes.get(eq) != Some(&b'=') {
            return Err(ParseError::new(
                MalformedMetric,
                eq,
                format!("expected `=` after metric `{name}`"),
            ));
        }
        let value_start = eq + 1;
        let value_end = text[value_start..]
            .find(',')
            .map(|i| i + value_start)
            .unwrap_or(text.len());
        let token = &text[value_start..value_end];
        let lowered = token.trim_start_matches(['-', '+']).to_ascii_lowercase();
        if matches!(lowered.as_str(), "nan" | "inf" | "infinity") {
            return Err(ParseError::new(
                NonFiniteValue,
                value_start,
                format!("metric `{name}` is not finite"),
            ));
        }
        match scan_number(token.as_bytes()) {
            Some(n) if n == token.len() => {}
            _ => {
                return Err(ParseError::new(
                    NonNumericValue,
                    value_start,
                    format!("`{token}` is not a number"),
                ))
            }
        }
        let value: f64 = token.parse().map_err(|_| {
            ParseError::new(NonNumericValue, value_start, format!("`{token}` is not a number"))
        })?;
        if !value.is_finite() {
            return Err(ParseError::new(
                NonFiniteValue,
                value_start,
                format!("metric `{name}` overflows"),
            ));
        }
        if metrics.iter().any(|m| m.name == name) {
            return Err(ParseError::new(
                DuplicateMetric,
                pos,
                format!("metric `{name}` listed twice"),
            ));
        }
        metrics.push(Metric::new(name, value));
        if value_end == text.len() {
            break;
        }
        if !text[value_end..].starts_with(", ") {
            return Err(ParseError::new(
                MalformedMetric,
                value_end,
                "metrics are separated by `, `",
            ));
        }
        pos = value_end + 2;
    }

    Ok(CommitMessage {
        id,
        description: description.to_string(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(n: u32) -> ExperimentId {
        ExperimentId::new(n).unwrap()
    }

    #[test]
    fn single_metric() {
        let m = parse_commit("exp(E001): muon baseline -- val_ppl=23.4").unwrap();
        assert_eq!(m.id(), id(1));
        assert_eq!(m.description(), "muon baseline");
        assert_eq!(m.metrics(), &[Metric::new("val_ppl", 23.4)]);
    }

    #[test]
    fn two_metrics_in_order() {
        let m = parse_commit("exp(E010): sweep lr -- loss=1.0e-3, acc=0.91").unwrap();
        assert_eq!(m.id(), id(10));
        assert_eq!(
            m.metrics(),
            &[Metric::new("loss", 0.001), Metric::new("acc", 0.91)]
        );
    }

    #[test]
    fn error_codes() {
        let cases = [
            ("fix: typo in readme", ErrorCode::NotExperimentCommit, 0),
            ("exp(E1): x -- a=1", ErrorCode::MalformedId, 4),
            ("exp(E001) x -- a=1", ErrorCode::MalformedHeader, 8),
            ("exp(E001): muon a=1", ErrorCode::MissingSeparator, 19),
            ("exp(E001):  -- a=1", ErrorCode::EmptyDescription, 11),
            ("exp(E001): x -- ", ErrorCode::MissingMetrics, 16),
            ("exp(E001): x -- a=fast", ErrorCode::NonNumericValue, 18),
            ("exp(E001): x -- a=nan", ErrorCode::NonFiniteValue, 18),
            ("exp(E001): x -- a=1e999", ErrorCode::NonFiniteValue, 18),
            ("exp(E001): x -- a=1, a=2", ErrorCode::DuplicateMetric, 21),
            ("exp(E001): x -- a=1,b=2", ErrorCode::MalformedMetric, 19),
            ("exp(E001): x -- 1a=1", ErrorCode::MalformedMetric, 16),
            ("exp(E001): x -- a=.5", ErrorCode::NonNumericValue, 18),
            ("exp(E001): x -- a=1.", ErrorCode::NonNumericValue, 18),
        ];
        for (text, code, offset) in cases {
            let err = parse_commit(text).unwrap_err();
            assert_eq!((err.code, err.offset), (code, offset), "{text}: {err}");
        }
    }

    #[test]
    fn description_may_contain_dashes() {
        let m = parse_commit("exp(E002): a - b --c -- x=1").unwrap();
        assert_eq!(m.description(), "a - b --c");
    }

    #[test]
    fn constructor_rejects_ambiguous_descriptions() {
        for desc in ["", "a -- b", "a --", "line\nbreak"] {
            assert!(
                CommitMessage::new(id(1), desc, vec![Metric::new("a", 1.0)]).is_err(),
                "{desc:?}"
            );
        }
        assert!(CommitMessage::new(id(1), "ok", vec![]).is_err());
        assert!(CommitMessage::new(id(1), "ok", vec![Metric::new("a", f64::NAN)]).is_err());
    }

    #[test]
    fn render_examples() {
        let m = CommitMessage::new(
            id(3),
            "muon + wd",
            vec![Metric::new("val_ppl", 22.1), Metric::new("loss", -0.5)],
        )
        .unwrap();
        assert_eq!(m.render(), "exp(E003): muon + wd -- val_ppl=22.1, loss=-0.5");
    }
}

//! Bibliography (`refs.bib`) plus the verification sidecar (`refs.status`).
//!
//! BibTeX has no place for verification state, so each entry's status lives
//! in a tab-separated sidecar keyed by entry key. Entries without a sidecar
//! line are unverified.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use biblatex::{Bibliography, ChunksExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

pub const BIB_FILE: &str = "refs.bib";
pub const BIB_STATUS_FILE: &str = "refs.status";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BibStatus {
    Unverified,
    Verified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub url: String,
    pub matched_title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BibEntry {
    pub key: String,
    pub title: String,
    pub authors: Vec<String>,
    pub year: Option<String>,
    pub venue: Option<String>,
    pub identifier: Option<String>,
    pub status: BibStatus,
    pub source_record: Option<SourceRecord>,
}

/// Lowercased title with braces, punctuation runs and whitespace collapsed,
/// for comparing a BibTeX title with the title found at the source.
pub fn normalize_title(title: &str) -> String {
    title
        .chars()
        .filter(|c| !matches!(c, '{' | '}'))
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn read_status(path: &Path) -> Result<BTreeMap<String, (BibStatus, Option<SourceRecord>)>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let entry = match parts.as_slice() {
            [key, "unverified"] => (key.to_string(), (BibStatus::Unverified, None)),
            [key, "verified", url, title] => (
                key.to_string(),
                (
                    BibStatus::Verified,
                    Some(SourceRecord {
                        url: url.to_string(),
                        matched_title: title.to_string(),
                    }),
                ),
            ),
            _ => {
                return Err(Error::Invalid(format!(
                    "{}:{}: malformed status line",
                    path.display(),
                    i + 1
                )))
            }
        };
        map.insert(entry.0, entry.1);
    }
    Ok(map)
}

fn write_status(path: &Path, map: &BTreeMap<String, (BibStatus, Option<SourceRecord>)>) -> Result<()> {
    let mut out = String::from("# key\tstatus\turl\tmatched title\n");
    for (key, (status, source)) in map {
        match (status, source) {
            (BibStatus::Verified, Some(s)) => {
                out.push_str(&format!("{key}\tverified\t{}\t{}\n", s.url, s.matched_title))
            }
            _ => out.push_str(&format!("{key}\tunverified\n")),
        }
    }
    atomic_write(path, out.as_bytes())
}

/// All bibliography entries of a workspace with their verification status.
/// A missing `refs.bib` is an empty bibliography.
pub fn load_bibliography(root: &Path) -> Result<Vec<BibEntry>> {
    let bib_path = root.join(BIB_FILE);
    let text = match fs::read_to_string(&bib_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(bib_path, e)),
    };
    let bib = Bibliography::parse(&text)
        .map_err(|e| Error::Invalid(format!("{BIB_FILE}: {e}")))?;
    let status = read_status(&root.join(BIB_STATUS_FILE))?;
    let field = |entry: &biblatex::Entry, names: &[&str]| {
        names
            .iter()
            .find_map(|n| entry.get(n).map(|c| c.format_verbatim()))
            .filter(|s| !s.trim().is_empty())
    };
    Ok(bib
        .iter()
        .map(|entry| {
            let (st, source) = status
                .get(&entry.key)
                .cloned()
                .unwrap_or((BibStatus::Unverified, None));
            // A verified status without a source record is not trusted.
            let st = if source.is_some() { st } else { BibStatus::Unverified };
            BibEntry {
                key: entry.key.clone(),
                title: field(entry, &["title"]).unwrap_or_default(),
                authors: field(entry, &["author"])
                    .map(|a| a.split(" and ").map(|s| s.trim().to_string()).collect())
                    .unwrap_or_default(),
                year: field(entry, &["year", "date"]),
                venue: field(entry, &["journal", "journaltitle", "booktitle", "publisher"]),
                identifier: field(entry, &["doi", "eprint", "isbn", "url"]),
                status: st,
                source_record: source,
            }
        })
        .collect())
}

/// Record that `key` was checked against its source. The title found at the
/// source must match the entry's title.
pub fn mark_verified(root: &Path, key: &str, url: &str, matched_title: &str) -> Result<BibEntry> {
    let entries = load_bibliography(root)?;
    let entry = entries
        .iter()
        .find(|e| e.key == key)
        .ok_or_else(|| Error::NotFound(format!("no bibliography entry `{key}` in {BIB_FILE}")))?;
    if url.trim().is_empty() || url.contains(['\t', '\n']) || matched_title.contains(['\t', '\n']) {
        return Err(Error::Invalid("source URL and title must be single-line and non-empty".into()));
    }
    if normalize_title(&entry.title) != normalize_title(matched_title) {
        return Err(Error::Conflict(format!(
            "title at source `{matched_title}` does not match entry title `{}` (Commandment III)",
            entry.title
        )));
    }
    let path = root.join(BIB_STATUS_FILE);
    let mut status = read_status(&path)?;
    let source = SourceRecord {
        url: url.to_string(),
        matched_title: matched_title.to_string(),
    };
    status.insert(key.to_string(), (BibStatus::Verified, Some(source.clone())));
    write_status(&path, &status)?;
    Ok(BibEntry {
        status: BibStatus::Verified,
        source_record: Some(source),
        ..entry.clone()
    })
}

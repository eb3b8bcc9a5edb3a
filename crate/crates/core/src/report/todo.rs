use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ReportError, ReportErrors};
use crate::error::{Error, IoContext, Result};
use crate::fsutil::atomic_write;

pub const TODO_FILE: &str = "TODO.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TodoState {
    Open,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TodoKind {
    OpenQuestion,
    UnverifiedClaim,
    DeferredWork,
    Other,
}

impl TodoKind {
    pub const ALL: [TodoKind; 4] = [
        TodoKind::OpenQuestion,
        TodoKind::UnverifiedClaim,
        TodoKind::DeferredWork,
        TodoKind::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TodoKind::OpenQuestion => "open_question",
            TodoKind::UnverifiedClaim => "unverified_claim",
            TodoKind::DeferredWork => "deferred_work",
            TodoKind::Other => "other",
        }
    }
}

impl std::str::FromStr for TodoKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TodoKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown TODO kind `{s}` (expected open_question, unverified_claim, deferred_work or other)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TodoItem {
    pub text: String,
    pub state: TodoState,
    pub kind: TodoKind,
}

impl TodoItem {
    pub fn open(text: impl Into<String>, kind: TodoKind) -> Self {
        TodoItem {
            text: text.into(),
            state: TodoState::Open,
            kind,
        }
    }

    fn parse(line: &str) -> Option<TodoItem> {
        let rest = line.strip_prefix("- [")?;
        let (state, rest) = match rest.get(..2)? {
            " ]" => (TodoState::Open, &rest[2..]),
            "x]" | "X]" => (TodoState::Done, &rest[2..]),
            _ => return None,
        };
        let rest = rest.strip_prefix(' ')?.trim_end();
        let (text, kind) = match rest.strip_suffix(')').and_then(|r| r.rsplit_once(" (")) {
            Some((text, tag)) => match tag.parse::<TodoKind>() {
                Ok(kind) => (text, kind),
                Err(_) => (rest, TodoKind::Other),
            },
            None => (rest, TodoKind::Other),
        };
        let text = text.trim();
        (!text.is_empty()).then(|| TodoItem {
            text: text.to_string(),
            state,
            kind,
        })
    }
}

impl fmt::Display for TodoItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = match self.state {
            TodoState::Open => ' ',
            TodoState::Done => 'x',
        };
        write!(f, "- [{mark}] {} ({})", self.text, self.kind.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TodoLine {
    Item(TodoItem),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TodoEdit {
    Add { text: String, kind: TodoKind },
    Check { text: String },
    Uncheck { text: String },
}

/// `TODO.md` as a sequence of checklist items and free-text lines.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TodoList {
    pub lines: Vec<TodoLine>,
}

impl TodoList {
    pub fn empty() -> Self {
        TodoList {
            lines: vec![TodoLine::Text("# TODO".into()), TodoLine::Text(String::new())],
        }
    }

    pub fn parse(text: &str) -> std::result::Result<Self, ReportErrors> {
        let mut lines = Vec::new();
        let mut errors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.starts_with("- [") {
                match TodoItem::parse(line) {
                    Some(item) => lines.push(TodoLine::Item(item)),
                    None => errors.push(ReportError::MalformedTodo {
                        line: i + 1,
                        text: line.to_string(),
                    }),
                }
            } else {
                lines.push(TodoLine::Text(line.to_string()));
            }
        }
        if errors.is_empty() {
            Ok(TodoList { lines })
        } else {
            Err(ReportErrors(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Ok(Self::parse(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.render().as_bytes())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            match line {
                TodoLine::Item(item) => out.push_str(&item.to_string()),
                TodoLine::Text(t) => out.push_str(t),
            }
            out.push('\n');
        }
        out
    }

    pub fn items(&self) -> impl Iterator<Item = &TodoItem> {
        self.lines.iter().filter_map(|l| match l {
            TodoLine::Item(i) => Some(i),
            TodoLine::Text(_) => None,
        })
    }

    pub fn open_items(&self) -> Vec<TodoItem> {
        self.items()
            .filter(|i| i.state == TodoState::Open)
            .cloned()
            .collect()
    }

    fn find_mut(&mut self, text: &str, prefer: TodoState) -> Option<&mut TodoItem> {
        let mut fallback = None;
        for (i, line) in self.lines.iter().enumerate() {
            if let TodoLine::Item(item) = line {
                if item.text == text {
                    if item.state == prefer {
                        fallback = Some(i);
                        break;
                    }
                    fallback.get_or_insert(i);
                }
            }
        }
        match fallback.map(|i| &mut self.lines[i]) {
            Some(TodoLine::Item(item)) => Some(item),
            _ => None,
        }
    }

    fn unknown(&self, text: &str) -> Error {
        let nearest = self
            .items()
            .map(|i| (strsim::levenshtein(&i.text, text), &i.text))
            .min_by_key(|(d, _)| *d);
        match nearest {
            Some((_, t)) => Error::NotFound(format!(
                "no TODO item `{text}`; did you mean `{t}`?"
            )),
            None => Error::NotFound(format!("no TODO item `{text}` (TODO.md is empty)")),
        }
    }

    /// Apply one edit. Completed items are kept and marked done.
    pub fn apply(&mut self, edit: &TodoEdit) -> Result<()> {
        match edit {
            TodoEdit::Add { text, kind } => {
                let text = text.trim();
                if text.is_empty() || text.contains('\n') {
                    return Err(Error::Invalid("TODO text must be a non-empty single line".into()));
                }
                let item = TodoItem::open(text, *kind);
                let at = self
                    .lines
                    .iter()
                    .rposition(|l| matches!(l, TodoLine::Item(_)))
                    .map(|i| i + 1)
                    .unwrap_or(self.lines.len());
                self.lines.insert(at, TodoLine::Item(item));
            }
            TodoEdit::Check { text } => match self.find_mut(text, TodoState::Open) {
                Some(item) => item.state = TodoState::Done,
                None => return Err(self.unknown(text)),
            },
            TodoEdit::Uncheck { text } => match self.find_mut(text, TodoState::Done) {
                Some(item) => item.state = TodoState::Open,
                None => return Err(self.unknown(text)),
            },
        }
        Ok(())
    }

    pub fn apply_all(&mut self, edits: &[TodoEdit]) -> Result<()> {
        let mut next = self.clone();
        for edit in edits {
            next.apply(edit)?;
        }
        *self = next;
        Ok(())
    }
}

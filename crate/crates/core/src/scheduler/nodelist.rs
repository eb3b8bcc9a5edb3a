//! Compressed hostlist syntax, e.g. `gpu[01-03,07],head1`.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("nodelist offset {offset}: {reason}")]
pub struct NodelistError {
    pub offset: usize,
    pub reason: String,
}

fn err(offset: usize, reason: impl Into<String>) -> NodelistError {
    NodelistError {
        offset,
        reason: reason.into(),
    }
}

/// Upper bound on hosts produced by one expression.
pub const MAX_HOSTS: usize = 1 << 20;

enum Part {
    Lit(String),
    Group(Vec<String>),
}

fn parse_group(s: &[u8], start: usize) -> Result<(Vec<String>, usize), NodelistError> {
    let mut i = start;
    let mut out = Vec::new();
    loop {
        let lo_start = i;
        while i < s.len() && s[i].is_ascii_digit() {
            i += 1;
        }
        if i == lo_start {
            return Err(err(i, "expected a number in brackets"));
        }
        let lo = std::str::from_utf8(&s[lo_start..i]).expect("ascii");
        let (hi, hi_at) = if s.get(i) == Some(&b'-') {
            i += 1;
            let hs = i;
            while i < s.len() && s[i].is_ascii_digit() {
                i += 1;
            }
            if i == hs {
                return Err(err(i, "expected a number after `-`"));
            }
            (std::str::from_utf8(&s[hs..i]).expect("ascii"), hs)
        } else {
            (lo, lo_start)
        };
        let a: u64 = lo.parse().map_err(|_| err(lo_start, "number too large"))?;
        let b: u64 = hi.parse().map_err(|_| err(hi_at, "number too large"))?;
        if b < a {
            return Err(err(hi_at, format!("reversed range {lo}-{hi}")));
        }
        if (b - a) as usize >= MAX_HOSTS {
            return Err(err(lo_start, "range too large"));
        }
        let width = lo.len();
        for n in a..=b {
            out.push(format!("{n:0width$}"));
        }
        match s.get(i) {
            Some(b',') => i += 1,
            Some(b']') => return Ok((out, i + 1)),
            Some(_) => return Err(err(i, "unexpected character in brackets")),
            None => return Err(err(i, "unbalanced `[`")),
        }
    }
}

/// Expand `expr` into hostnames, preserving order and zero padding.
pub fn expand_nodelist(expr: &str) -> Result<Vec<String>, NodelistError> {
    let s = expr.as_bytes();
    let mut hosts = Vec::new();
    let mut i = 0;
    if s.is_empty() {
        return Err(err(0, "empty nodelist"));
    }
    loop {
        let item_start = i;
        let mut parts: Vec<Part> = Vec::new();
        let mut lit = String::new();
        while i < s.len() && s[i] != b',' {
            match s[i] {
                b'[' => {
                    if !lit.is_empty() {
                        parts.push(Part::Lit(std::mem::take(&mut lit)));
                    }
                    let (g, next) = parse_group(s, i + 1)?;
                    parts.push(Part::Group(g));
                    i = next;
                }
                b']' => return Err(err(i, "unbalanced `]`")),
                c if c.is_ascii_alphanumeric() || matches!(c, b'-' | b'_' | b'.') => {
                    lit.push(c as char);
                    i += 1;
                }
                _ => return Err(err(i, "invalid hostname character")),
            }
        }
        if !lit.is_empty() {
            parts.push(Part::Lit(lit));
        }
        if parts.is_empty() {
            return Err(err(item_start, "empty hostname"));
        }
        let mut names = vec![String::new()];
        for p in &parts {
            names = match p {
                Part::Lit(l) => names.into_iter().map(|n| n + l).collect(),
                Part::Group(g) => {
                    if names.len().saturating_mul(g.len()) > MAX_HOSTS {
                        return Err(err(item_start, "expression expands to too many hosts"));
                    }
                    names
                        .iter()
                        .flat_map(|n| g.iter().map(move |x| format!("{n}{x}")))
                        .collect()
                }
            };
        }
        hosts.extend(names);
        if hosts.len() > MAX_HOSTS {
            return Err(err(i, "expression expands to too many hosts"));
        }
        if i == s.len() {
            break;
        }
        i += 1;
        if i == s.len() {
            return Err(err(i, "empty hostname"));
        }
    }
    Ok(hosts)
}

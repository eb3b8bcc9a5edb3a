//! Static write-target analysis for shell commands run without a container.
//!
//! Best effort: it understands redirections, the common file-writing
//! utilities, `cd`, nested `sh -c` and command substitution. Anything it
//! cannot resolve (a write target containing an expansion) is refused.

use std::path::{Component, Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Word { text: String, dynamic: bool },
    /// Command separator: `;`, `&&`, `||`, `|`, `&`, newline, parentheses.
    Sep,
    /// Output redirection; the next word is its target.
    RedirOut,
    /// Input redirection or fd duplication; the next word is not a write.
    RedirOther,
}

/// Lexes `src` and collects the bodies of `$(...)` and backquotes into
/// `nested` for separate analysis.
#[allow(unused_assignments)]
fn lex(src: &str, nested: &mut Vec<String>) -> Result<Vec<Tok>, String> {
    let chars: Vec<char> = src.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    let mut word = String::new();
    let mut in_word = false;
    let mut dynamic = false;

    macro_rules! flush {
        () => {
            if in_word {
                toks.push(Tok::Word { text: std::mem::take(&mut word), dynamic });
                in_word = false;
                dynamic = false;
            }
        };
    }

    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' => {
                flush!();
                i += 1;
            }
            '\n' | ';' | '(' | ')' => {
                flush!();
                toks.push(Tok::Sep);
                i += 1;
            }
            '&' | '|' => {
                if c == '&' && chars.get(i + 1) == Some(&'>') {
                    flush!();
                    toks.push(Tok::RedirOut);
                    i += 2;
                    if chars.get(i) == Some(&'>') {
                        i += 1;
                    }
                    continue;
                }
                flush!();
                toks.push(Tok::Sep);
                i += 1;
                if chars.get(i) == Some(&c) {
                    i += 1;
                }
            }
            '>' | '<' => {
                // A word made only of digits right before is an fd number.
                if in_word && !dynamic && word.chars().all(|d| d.is_ascii_digit()) {
                    word.clear();
                    in_word = false;
                } else {
                    flush!();
                }
                i += 1;
                if c == '<' {
                    // `<<` heredocs are not supported; `<` and `<&` read.
                    if chars.get(i) == Some(&'<') {
                        return Err("heredocs are not supported by the direct-execution checker".into());
                    }
                    if chars.get(i) == Some(&'&') {
                        i += 1;
                    }
                    toks.push(Tok::RedirOther);
                    continue;
                }
                match chars.get(i) {
                    Some('>') | Some('|') => {
                        i += 1;
                        toks.push(Tok::RedirOut);
                    }
                    Some('&') => {
                        i += 1;
                        toks.push(Tok::RedirOther);
                    }
                    _ => toks.push(Tok::RedirOut),
                }
            }
            '\'' => {
                in_word = true;
                i += 1;
                while i < chars.len() && chars[i] != '\'' {
                    word.push(chars[i]);
                    i += 1;
                }
                if i == chars.len() {
                    return Err("unterminated single quote".into());
                }
                i += 1;
            }
            '"' => {
                in_word = true;
                i += 1;
                while i < chars.len() && chars[i] != '"' {
                    match chars[i] {
                        '\\' if i + 1 < chars.len() => {
                            word.push(chars[i + 1]);
                            i += 2;
                        }
                        '$' | '`' => {
                            dynamic = true;
                            i = substitution(&chars, i, nested, &mut word)?;
                        }
                        ch => {
                            word.push(ch);
                            i += 1;
                        }
                    }
                }
                if i == chars.len() {
                    return Err("unterminated double quote".into());
                }
                i += 1;
            }
            '\\' => {
                in_word = true;
                if let Some(&n) = chars.get(i + 1) {
                    if n != '\n' {
                        word.push(n);
                    }
                }
                i += 2;
            }
            '$' | '`' => {
                in_word = true;
                dynamic = true;
                i = substitution(&chars, i, nested, &mut word)?;
            }
            '*' | '?' | '[' | '~' => {
                in_word = true;
                dynamic = true;
                word.push(c);
                i += 1;
            }
            _ => {
                in_word = true;
                word.push(c);
                i += 1;
            }
        }
    }
    flush!();
    Ok(toks)
}

/// Consume a `$name`, `${...}`, `$(...)` or backquoted expansion starting at
/// `i`; returns the index after it.
fn substitution(chars: &[char], mut i: usize, nested: &mut Vec<String>, word: &mut String) -> Result<usize, String> {
    if chars[i] == '`' {
        let start = i + 1;
        i = start;
        while i < chars.len() && chars[i] != '`' {
            i += 1;
        }
        if i == chars.len() {
            return Err("unterminated backquote".into());
        }
        nested.push(chars[start..i].iter().collect());
        word.push('?');
        return Ok(i + 1);
    }
    i += 1;
    match chars.get(i) {
        Some('(') => {
            let start = i + 1;
            let mut depth = 1;
            i = start;
            while i < chars.len() {
                match chars[i] {
                    '(' => depth += 1,
                    ')' => {
                        depth -= 1;
                        if depth == 0 {
                            break;
                        }
                    }
                    _ => {}
                }
                i += 1;
            }
            if i == chars.len() {
                return Err("unterminated command substitution".into());
            }
            nested.push(chars[start..i].iter().collect());
            word.push('?');
            Ok(i + 1)
        }
        Some('{') => {
            while i < chars.len() && chars[i] != '}' {
                i += 1;
            }
            word.push('?');
            Ok(i + 1)
        }
        _ => {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            word.push('?');
            Ok(i)
        }
    }
}

/// Lexical normalization: resolve `.` and `..` without touching the disk.
pub fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other.as_os_str()),
        }
    }
    out
}

const HARMLESS: [&str; 4] = ["/dev/null", "/dev/stdout", "/dev/stderr", "/dev/tty"];

/// Paths a command would write. `Err` when a target cannot be determined.
#[derive(Debug, Default)]
struct Targets {
    paths: Vec<PathBuf>,
}

fn word_target(text: &str, dynamic: bool, cwd: &Path, out: &mut Targets) -> Result<(), String> {
    if dynamic {
        return Err(format!("cannot resolve write target `{text}`"));
    }
    if HARMLESS.contains(&text) {
        return Ok(());
    }
    out.paths.push(normalize(&cwd.join(text)));
    Ok(())
}

fn analyze(src: &str, cwd: &mut PathBuf, out: &mut Targets, depth: usize) -> Result<(), String> {
    if depth > 8 {
        return Err("shell nesting too deep".into());
    }
    let mut nested = Vec::new();
    let toks = lex(src, &mut nested)?;
    for inner in nested {
        analyze(&inner, &mut cwd.clone(), out, depth + 1)?;
    }
    let mut words: Vec<(String, bool)> = Vec::new();
    let mut it = toks.into_iter().peekable();
    loop {
        let tok = it.next();
        match tok {
            Some(Tok::Word { text, dynamic }) => words.push((text, dynamic)),
            Some(Tok::RedirOut) => match it.next() {
                Some(Tok::Word { text, dynamic }) => word_target(&text, dynamic, cwd, out)?,
                _ => return Err("redirection without a target".into()),
            },
            Some(Tok::RedirOther) => {
                if let Some(Tok::Word { .. }) = it.peek() {
                    it.next();
                }
            }
            Some(Tok::Sep) | None => {
                command(&words, cwd, out, depth)?;
                words.clear();
                if tok.is_none() {
                    break;
                }
            }
        }
    }
    Ok(())
}

fn operands(args: &[(String, bool)]) -> Vec<&(String, bool)> {
    let mut out = Vec::new();
    let mut opts = true;
    for a in args {
        if opts && a.0 == "--" {
            opts = false;
        } else if opts && a.0.starts_with('-') && a.0.len() > 1 {
            continue;
        } else {
            out.push(a);
        }
    }
    out
}

fn command(words: &[(String, bool)], cwd: &mut PathBuf, out: &mut Targets, depth: usize) -> Result<(), String> {
    // Skip leading environment assignments.
    let start = words
        .iter()
        .position(|(w, _)| !(w.contains('=') && !w.starts_with('=') && !w.starts_with('-')))
        .unwrap_or(words.len());
    let words = &words[start..];
    let Some(((name, name_dyn), args)) = words.split_first() else {
        return Ok(());
    };
    if *name_dyn {
        return Err(format!("cannot resolve command name `{name}`"));
    }
    let base = name.rsplit('/').next().unwrap_or(name);
    match base {
        "env" | "nohup" | "time" | "nice" | "exec" | "command" | "timeout" => {
            let rest: Vec<(String, bool)> = args
                .iter()
                .skip_while(|(w, _)| w.starts_with('-') || (base == "timeout" && w.chars().all(|c| c.is_ascii_digit() || c == '.' || c == 's')))
                .cloned()
                .collect();
            command(&rest, cwd, out, depth)
        }
        "cd" => {
            match args.first() {
                Some((dir, false)) => *cwd = normalize(&cwd.join(dir)),
                Some((dir, true)) => return Err(format!("cannot resolve directory `{dir}`")),
                None => {}
            }
            Ok(())
        }
        "sh" | "bash" | "dash" | "zsh" => {
            if let Some(pos) = args.iter().position(|(w, _)| w == "-c") {
                match args.get(pos + 1) {
                    Some((script, false)) => analyze(script, &mut cwd.clone(), out, depth + 1),
                    Some((script, true)) => Err(format!("cannot analyze dynamic script `{script}`")),
                    None => Err("`-c` without a script".into()),
                }
            } else if args.is_empty() {
                Err("interactive shells are not allowed".into())
            } else {
                Ok(())
            }
        }
        "touch" | "mkdir" | "rm" | "rmdir" | "truncate" | "tee" | "shred" | "unlink" | "mkfifo" | "chmod" | "chown" => {
            let ops = operands(args);
            let ops = if matches!(base, "chmod" | "chown") { ops.into_iter().skip(1).collect() } else { ops };
            for (w, d) in ops {
                word_target(w, *d, cwd, out)?;
            }
            Ok(())
        }
        "mv" => {
            for (w, d) in operands(args) {
                word_target(w, *d, cwd, out)?;
            }
            Ok(())
        }
        "cp" | "ln" | "install" | "rsync" => {
            if let Some((w, d)) = args.iter().find_map(|(w, d)| {
                w.strip_prefix("--target-directory=").map(|t| (t.to_string(), *d))
            }) {
                return word_target(&w, d, cwd, out);
            }
            if let Some(pos) = args.iter().position(|(w, _)| w == "-t") {
                if let Some((w, d)) = args.get(pos + 1) {
                    return word_target(w, *d, cwd, out);
                }
            }
            match operands(args).last() {
                Some((w, d)) => word_target(w, *d, cwd, out),
                None => Ok(()),
            }
        }
        "dd" => {
            for (w, d) in args {
                if let Some(t) = w.strip_prefix("of=") {
                    word_target(t, *d, cwd, out)?;
                }
            }
            Ok(())
        }
        "sed" | "perl" => {
            if args.iter().any(|(w, _)| w == "-i" || w.starts_with("-i") || w == "--in-place") {
                for (w, d) in operands(args).into_iter().skip(1) {
                    word_target(w, *d, cwd, out)?;
                }
            }
            Ok(())
        }
        "xargs" | "eval" | "source" | "." => Err(format!("`{base}` cannot be analyzed statically")),
        _ => Ok(()),
    }
}

/// Outcome of checking a command against write roots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WriteCheck {
    Allowed,
    Denied(String),
}

/// Check every write target of `command` (run with working directory `cwd`)
/// lies under one of `write_roots` and under none of `deny_roots`.
pub fn check_writes(command: &str, cwd: &Path, write_roots: &[PathBuf], deny_roots: &[PathBuf]) -> WriteCheck {
    let mut targets = Targets::default();
    let mut dir = normalize(cwd);
    if let Err(e) = analyze(command, &mut dir, &mut targets, 0) {
        return WriteCheck::Denied(e);
    }
    for t in &targets.paths {
        if deny_roots.iter().any(|r| t.starts_with(r)) {
            return WriteCheck::Denied(format!("write to {} (read-only area)", t.display()));
        }
        if !write_roots.iter().any(|r| t.starts_with(r)) {
            return WriteCheck::Denied(format!("write to {} outside the sandbox write roots", t.display()));
        }
    }
    WriteCheck::Allowed
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(cmd: &str) -> WriteCheck {
        check_writes(
            cmd,
            Path::new("/ws"),
            &[PathBuf::from("/ws")],
            &[PathBuf::from("/ws/locks")],
        )
    }

    fn denied(cmd: &str) -> bool {
        matches!(check(cmd), WriteCheck::Denied(_))
    }

    #[test]
    fn allowed_commands() {
        for cmd in [
            "echo hello",
            "echo hi > out.txt",
            "python train.py 2>&1 | tee logs/run.log",
            "mkdir -p results && touch results/a",
            "cat < /etc/passwd > copy",
            "echo x >/dev/null",
            "cp /etc/hosts ./hosts",
            "FOO=1 make -C src",
            "sh -c 'echo a > b'",
            "cd sub && echo x > y",
            "grep -c '>' file",
        ] {
            assert_eq!(check(cmd), WriteCheck::Allowed, "{cmd}");
        }
    }

    #[test]
    fn adversarial_commands() {
        for cmd in [
            "echo x > /tmp/escape",
            "echo x >> ../escape",
            "touch /etc/passwd",
            "cd .. && touch escape",
            "cd /tmp; echo x > y",
            "sh -c 'echo x > /tmp/a'",
            "bash -c \"cd / && rm -rf tmp\"",
            "cp a /tmp/",
            "mv /ws/a /tmp/a",
            "dd if=/dev/zero of=/tmp/z",
            "echo $(touch /tmp/z)",
            "echo `rm /tmp/q`",
            "echo x > $HOME/f",
            "tee /tmp/x < in",
            "echo x &> /tmp/both",
            "echo x > locks/protected.sum",
            "sed -i s/a/b/ /etc/hosts",
            "echo x | xargs rm",
            "env A=1 touch /tmp/x",
            "ln -s /ws/a /tmp/link",
            "echo 'unterminated",
        ] {
            assert!(denied(cmd), "{cmd}");
        }
    }
}

//! Thin wrapper over the `git` command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Git {
    dir: PathBuf,
}

/// One commit from a history scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub hash: String,
    pub subject: String,
    pub body: String,
}

impl Git {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Git { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn command(&self) -> Command {
        let mut cmd = Command::new("git");
        cmd.arg("-C").arg(&self.dir);
        // Keep output stable regardless of user configuration.
        cmd.env("GIT_TERMINAL_PROMPT", "0")
            .env("LC_ALL", "C")
            .env_remove("GIT_DIR")
            .env_remove("GIT_WORK_TREE")
            .env_remove("GIT_INDEX_FILE");
        cmd
    }

    pub fn run(&self, args: &[&str]) -> Result<String> {
        self.run_with_input(args, None)
    }

    pub fn run_with_input(&self, args: &[&str], input: Option<&str>) -> Result<String> {
        let mut cmd = self.command();
        cmd.args(args)
            .stdin(if input.is_some() {
                Stdio::piped()
            } else {
                Stdio::null()
            })
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        let mut child = cmd.spawn().map_err(|e| Error::Git {
            command: args.join(" "),
            stderr: e.to_string(),
        })?;
        if let Some(text) = input {
            if let Some(mut stdin) = child.stdin.take() {
                stdin.write_all(text.as_bytes()).map_err(|e| Error::Git {
                    command: args.join(" "),
                    stderr: e.to_string(),
                })?;
            }
        }
        let out = child.wait_with_output().map_err(|e| Error::Git {
            command: args.join(" "),
            stderr: e.to_string(),
        })?;
        if !out.status.success() {
            return Err(Error::Git {
                command: args.join(" "),
                stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            });
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }

    pub fn init(&self) -> Result<()> {
        self.run(&["init", "-q", "-b", "main"])?;
        if self.run(&["config", "user.email"]).is_err() {
            self.run(&["config", "user.email", "harness@localhost"])?;
            self.run(&["config", "user.name", "expharness"])?;
        }
        Ok(())
    }

    pub fn common_dir(&self) -> Result<PathBuf> {
        let out = self.run(&["rev-parse", "--git-common-dir"])?;
        let p = PathBuf::from(out.trim());
        Ok(if p.is_absolute() { p } else { self.dir.join(p) })
    }

    pub fn head(&self) -> Result<Option<String>> {
        match self.run(&["rev-parse", "--verify", "-q", "HEAD"]) {
            Ok(s) => Ok(Some(s.trim().to_string())),
            Err(_) => Ok(None),
        }
    }

    pub fn current_branch(&self) -> Result<String> {
        Ok(self
            .run(&["symbolic-ref", "--short", "-q", "HEAD"])
            .map(|s| s.trim().to_string())
            .unwrap_or_else(|_| "HEAD".to_string()))
    }

    pub fn branch_exists(&self, branch: &str) -> bool {
        self.run(&["rev-parse", "--verify", "-q", &format!("refs/heads/{branch}")])
            .is_ok()
    }

    pub fn add_all(&self) -> Result<()> {
        self.run(&["add", "-A"]).map(drop)
    }

    pub fn is_clean(&self) -> Result<bool> {
        Ok(self.run(&["status", "--porcelain"])?.trim().is_empty())
    }

    /// Commit the index with `message` taken verbatim.
    pub fn commit(&self, message: &str) -> Result<String> {
        self.run_with_input(
            &["commit", "-q", "--allow-empty", "--cleanup=verbatim", "-F", "-"],
            Some(message),
        )?;
        self.head()?.ok_or_else(|| Error::Git {
            command: "commit".into(),
            stderr: "no HEAD after commit".into(),
        })
    }

    pub fn tag(&self, name: &str, commit: &str) -> Result<()> {
        self.run(&["tag", name, commit]).map(drop)
    }

    /// Every commit reachable from any ref, oldest first.
    pub fn log_all(&self) -> Result<Vec<LogEntry>> {
        if self.head()?.is_none() && self.run(&["for-each-ref", "--count=1"])?.trim().is_empty() {
            return Ok(Vec::new());
        }
        let out = self.run(&[
            "log",
            "--all",
            "--reverse",
            "--topo-order",
            "--format=%H%x1f%s%x1f%b%x1e",
        ])?;
        Ok(out
            .split('\x1e')
            .filter_map(|rec| {
                let rec = rec.trim_start_matches('\n');
                let mut parts = rec.splitn(3, '\x1f');
                let hash = parts.next()?.trim();
                if hash.is_empty() {
                    return None;
                }
                Some(LogEntry {
                    hash: hash.to_string(),
                    subject: parts.next().unwrap_or("").to_string(),
                    body: parts.next().unwrap_or("").trim_end().to_string(),
                })
            })
            .collect())
    }

    /// Map of commit hash to the tag names pointing at it.
    pub fn tags_by_commit(&self) -> Result<Vec<(String, String)>> {
        let out = self.run(&[
            "for-each-ref",
            "--format=%(objectname) %(*objectname) %(refname:short)",
            "refs/tags",
        ])?;
        Ok(out
            .lines()
            .filter_map(|line| {
                let mut parts = line.split(' ');
                let obj = parts.next()?;
                let peeled = parts.next()?;
                let name = parts.next()?;
                let commit = if peeled.is_empty() { obj } else { peeled };
                Some((commit.to_string(), name.to_string()))
            })
            .collect())
    }

    pub fn show_file(&self, commit: &str, path: &str) -> Result<Option<Vec<u8>>> {
        let spec = format!("{commit}:{path}");
        let mut cmd = self.command();
        let out = cmd
            .args(["show", &spec])
            .stderr(Stdio::null())
            .output()
            .map_err(|e| Error::Git {
                command: format!("show {spec}"),
                stderr: e.to_string(),
            })?;
        Ok(out.status.success().then_some(out.stdout))
    }

    pub fn ls_tree(&self, commit: &str) -> Result<Vec<String>> {
        Ok(self
            .run(&["ls-tree", "-r", "--name-only", commit])?
            .lines()
            .map(str::to_string)
            .collect())
    }

    pub fn worktree_add(&self, path: &Path, branch: &str, create: bool) -> Result<()> {
        let p = path.to_string_lossy();
        if create {
            self.run(&["worktree", "add", "-q", "-b", branch, &p, "HEAD"])
        } else {
            self.run(&["worktree", "add", "-q", &p, branch])
        }
        .map(drop)
    }

    /// `(path, branch)` for every registered worktree.
    pub fn worktrees(&self) -> Result<Vec<(PathBuf, Option<String>)>> {
        let out = self.run(&["worktree", "list", "--porcelain"])?;
        let mut result = Vec::new();
        let mut path: Option<PathBuf> = None;
        let mut branch = None;
        for line in out.lines().chain(std::iter::once("")) {
            if let Some(p) = line.strip_prefix("worktree ") {
                path = Some(PathBuf::from(p));
            } else if let Some(b) = line.strip_prefix("branch ") {
                branch = Some(b.trim_start_matches("refs/heads/").to_string());
            } else if line.is_empty() {
                if let Some(p) = path.take() {
                    result.push((p, branch.take()));
                }
            }
        }
        Ok(result)
    }
}

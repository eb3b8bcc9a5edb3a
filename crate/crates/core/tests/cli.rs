//! Exit codes and output of the `exh` binary.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::{experiment, toy_workspace, MANIFEST};

fn exh(cwd: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_exh")).current_dir(cwd).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn init_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.toml"), MANIFEST).unwrap();
    let (code, out, _) = exh(dir.path(), &["init", "ws", "--manifest", "m.toml"]);
    assert_eq!(code, 0);
    assert!(out.contains("workspace:"));
    assert!(dir.path().join("ws/report.tex").is_file());

    let (code, _, err) = exh(dir.path(), &["init", "ws2", "--manifest", "missing.toml"]);
    assert_eq!(code, 2, "{err}");
    let (code, _, err) = exh(dir.path(), &["init", "ws", "--manifest", "m.toml"]);
    assert_eq!(code, 2);
    assert!(err.contains("not empty"), "{err}");
}

#[test]
fn usage_and_help() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(exh(dir.path(), &["frobnicate"]).0, 2);
    assert_eq!(exh(dir.path(), &["--help"]).0, 0);
    assert_eq!(exh(dir.path(), &["status"]).0, 2);
}

#[test]
fn status_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    let (code, out, _) = exh(&root, &["--porcelain", "status"]);
    assert_eq!(code, 0);
    for line in ["experiments=0", "open_todos=0", "violations=0", "processes=0"] {
        assert!(out.lines().any(|l| l == line), "missing {line} in\n{out}");
    }
    experiment(&root, 1, None);
    experiment(&root, 2, Some("E001"));
    let (code, out, _) = exh(&root, &["--porcelain", "status"]);
    assert_eq!(code, 0);
    assert!(out.lines().any(|l| l == "experiments=2"), "{out}");
    assert!(out.contains("E001") && out.contains("E002"));
}

#[test]
fn status_surfaces_blocking_violation() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    let hooks = root.join("hooks.cfg");
    let cfg = fs::read_to_string(&hooks)
        .unwrap()
        .replace("on session_start run RECORD_BEFORE_ITERATE severity=warn", "on session_start run RECORD_BEFORE_ITERATE severity=block");
    fs::write(&hooks, cfg).unwrap();
    let r = |args: &[&str]| exh(&root, args);
    assert_eq!(r(&["exp", "begin", "lr to 1"]).0, 0);
    let args = common::record_args("Half done", "val_loss=3.1");
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(r(&args).0, 0);
    let (code, out, _) = r(&["--porcelain", "status"]);
    assert_eq!(code, 1, "{out}");
    assert!(out.lines().any(|l| l == "violations=1"), "{out}");
    assert!(out.contains("RECORD_BEFORE_ITERATE"));
}

#[test]
fn loop_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    let r = |args: &[&str]| exh(&root, args);
    assert_eq!(r(&["exp", "begin", "lr to 1"]).0, 0);
    assert_eq!(r(&["exp", "begin", "another"]).0, 1);
    common::set_lr(&root, 1);
    assert_eq!(r(&["tier", "run", "3"]).0, 1);
    for t in ["1", "2", "3"] {
        let (code, out, _) = r(&["--porcelain", "tier", "run", t]);
        assert_eq!(code, 0);
        assert!(out.contains("status=pass"), "{out}");
    }
    let args = common::record_args("Lower lr", "val_loss=3.1");
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(r(&args).0, 0);
    let (code, out, err) = r(&["--porcelain", "exp", "commit"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("subject=exp(E001): lr to 1 -- val_loss=3.1"), "{out}");
    let (code, out, _) = r(&["--porcelain", "exp", "best", "val_loss"]);
    assert_eq!(code, 0);
    assert!(out.contains("E001"));
}

#[test]
fn report_validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    experiment(&root, 1, None);
    assert_eq!(exh(&root, &["report", "validate"]).0, 0);
    let path = root.join("report.tex");
    let text = fs::read_to_string(&path).unwrap();
    let start = text.find("\\paragraph{Results}").unwrap();
    let end = text[start..].find("\\paragraph{Analysis}").unwrap() + start;
    fs::write(&path, format!("{}{}", &text[..start], &text[end..])).unwrap();
    let (code, out, err) = exh(&root, &["report", "validate"]);
    assert_eq!(code, 1);
    assert!(format!("{out}{err}").contains("E001 missing Results"), "{out}{err}");
}

#[test]
fn guard_pre_commit_two_variables() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    experiment(&root, 1, None);
    assert_eq!(exh(&root, &["exp", "begin", "both", "--parent", "E001"]).0, 0);
    fs::write(root.join("config.toml"), "lr = 2\nmomentum = 9\nwidth = 128\n").unwrap();
    let (code, out, _) = exh(&root, &["guard", "run", "--trigger", "pre_commit"]);
    assert_eq!(code, 1);
    assert!(out.contains("ONE_VARIABLE"), "{out}");
    fs::write(root.join("config.toml"), "lr = 2\nmomentum = 9\nwidth = 64\n").unwrap();
    assert_eq!(exh(&root, &["guard", "run", "--trigger", "pre_commit"]).0, 0);
}

#[test]
fn protected_edit_reported_by_guard() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    fs::write(root.join("eval.sh"), "echo val_loss=0\n").unwrap();
    let (code, out, _) = exh(&root, &["guard", "run", "--trigger", "file_edit", "--touched", "eval.sh"]);
    assert_eq!(code, 1);
    assert!(out.contains("PROTECTED_EVAL"));
}

#[test]
fn todo_commands() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    assert_eq!(exh(&root, &["todo", "add", "verify formula for p=3", "--kind", "unverified_claim"]).0, 0);
    let todo = fs::read_to_string(root.join("TODO.md")).unwrap();
    assert!(todo.contains("- [ ] verify formula for p=3 (unverified_claim)"));
    assert_eq!(exh(&root, &["todo", "check", "verify formula for p=3"]).0, 0);
    assert!(fs::read_to_string(root.join("TODO.md")).unwrap().contains("- [x] verify formula for p=3"));
    let (code, _, err) = exh(&root, &["todo", "check", "verify formula for p=4"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn nodes_expand_expression() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, _) = exh(dir.path(), &["--porcelain", "nodes", "--nodelist", "n[1-2,5],m[09-10]"]);
    assert_eq!(code, 0);
    assert!(out.lines().any(|l| l == "nodes=5"), "{out}");
    assert!(out.contains("m09") && out.contains("n5"));
}

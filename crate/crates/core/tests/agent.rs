//! Fake and real agent sessions against a toy workspace.

mod common;

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;
use std::time::Duration;

use expharness::agent::{
    self, normalized_workspace, start_session, Action, AdapterConfig, AgentScript, EventKind, FakeSession, Halt,
    WorkdirMode,
};
use expharness::{Error, RuleId};

use common::{open, record_args, toy_workspace};

fn with_exh_on_path() {
    let bin = Path::new(env!("CARGO_BIN_EXE_exh")).parent().unwrap().to_path_buf();
    let path = std::env::var("PATH").unwrap_or_default();
    if !path.split(':').any(|p| Path::new(p) == bin) {
        std::env::set_var("PATH", format!("{}:{path}", bin.display()));
    }
}

fn run(cmd: &str) -> Action {
    Action::RunCommand { command: cmd.into() }
}

#[test]
fn empty_script_ends_immediately_and_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    let before = normalized_workspace(&root).unwrap();
    let ws = open(&root);
    let s = agent::replay(&ws, &AgentScript::new(Vec::new())).unwrap();
    assert_eq!(s.events.len(), 1);
    assert_eq!(s.events[0].kind, EventKind::SessionEnd);
    assert_eq!(normalized_workspace(&root).unwrap(), before);
}

#[test]
fn loop_events_are_ordered() {
    with_exh_on_path();
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    let record: Vec<String> = std::iter::once("exh".to_string())
        .chain(record_args("One", "val_loss=3.1"))
        .map(|a| expharness::fsutil::shell_quote(&a))
        .collect();
    let script = AgentScript::new(vec![
        run("exh exp begin 'lr to 1'"),
        Action::ReplaceInFile {
            path: "config.toml".into(),
            find: "lr = 5".into(),
            replace: "lr = 1".into(),
        },
        run("exh tier run 1"),
        run("exh tier run 2"),
        run("exh tier run 3"),
        run(&record.join(" ")),
        run("exh exp commit"),
    ]);
    let ws = open(&root);
    let s = agent::replay(&ws, &script).unwrap();
    assert!(s.halted.is_none(), "{:?}", s.halted);
    let pos = |pred: &dyn Fn(&EventKind) -> bool| s.events.iter().position(|e| pred(&e.kind)).unwrap();
    let tier = pos(&|k| matches!(k, EventKind::CommandRun { command, exit: 0 } if command.contains("tier run 3")));
    let report = pos(&|k| matches!(k, EventKind::FileEdit { paths } if paths.iter().any(|p| p == "report.tex")));
    let commit = pos(&|k| matches!(k, EventKind::CommandRun { command, exit: 0 } if command.contains("exp commit")));
    assert!(tier < report && report < commit, "{tier} {report} {commit}");
    assert_eq!(s.events.last().unwrap().kind, EventKind::SessionEnd);
    assert_eq!(expharness::ledger::scan(&ws.git()).unwrap().records.len(), 1);
}

#[test]
fn blocked_edit_pauses_until_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    let good = fs::read_to_string(root.join("report.tex")).unwrap();
    let ws = open(&root);
    let script = AgentScript::new(vec![
        Action::WriteFile {
            path: "report.tex".into(),
            content: "no markers here\n".into(),
        },
        Action::WriteFile {
            path: "notes.md".into(),
            content: "next\n".into(),
        },
    ]);
    let mut s = FakeSession::new(&ws, script).unwrap();
    s.run().unwrap();
    match &s.halted {
        Some(Halt::Blocked { action: 0, violations }) => {
            assert!(violations.iter().any(|v| v.rule == RuleId::ReportFields))
        }
        other => panic!("expected a block, got {other:?}"),
    }
    assert!(!root.join("notes.md").exists());
    s.resume().unwrap();
    assert!(matches!(s.halted, Some(Halt::Blocked { .. })));
    fs::write(root.join("report.tex"), good).unwrap();
    s.resume().unwrap();
    assert!(s.halted.is_none() && s.is_finished());
    assert!(root.join("notes.md").exists());
}

#[test]
fn protected_edit_halts_session() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    let ws = open(&root);
    let script = AgentScript::new(vec![Action::WriteFile {
        path: "eval.sh".into(),
        content: "echo val_loss=0.0\n".into(),
    }]);
    let s = agent::replay(&ws, &script).unwrap();
    match &s.halted {
        Some(Halt::Blocked { violations, .. }) => {
            assert!(violations.iter().any(|v| v.rule == RuleId::ProtectedEval && v.detail.contains("Commandment II")))
        }
        other => panic!("expected a block, got {other:?}"),
    }
}

#[test]
fn missing_agent_binary_leaves_workspace_alone() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    let before = normalized_workspace(&root).unwrap();
    let ws = open(&root);
    let adapter = AdapterConfig {
        binary: "no-such-agent-binary".into(),
        instruction_arg: "{instructions}".into(),
        workdir_mode: WorkdirMode::Worktree,
    };
    let err = start_session(&ws, &adapter, &ws.instructions_path()).unwrap_err();
    assert!(matches!(err, Error::NotFound(_)));
    assert_eq!(normalized_workspace(&root).unwrap(), before);
}

#[test]
fn real_agent_is_stopped_on_violation_and_continued() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    let agent_path = dir.path().join("agent.sh");
    fs::write(
        &agent_path,
        "#!/bin/sh\ntest -f \"$1\" || exit 9\necho seen > notes.txt\nsleep 1\necho 'echo val_loss=0' > eval.sh\nsleep 1\necho done > after.txt\n",
    )
    .unwrap();
    fs::set_permissions(&agent_path, fs::Permissions::from_mode(0o755)).unwrap();
    let ws = open(&root);
    let adapter = AdapterConfig {
        binary: agent_path.to_string_lossy().into_owned(),
        instruction_arg: "{instructions}".into(),
        workdir_mode: WorkdirMode::Workspace,
    };
    let mut s = start_session(&ws, &adapter, &ws.instructions_path()).unwrap();
    s.poll = Duration::from_millis(50);
    let paths = |e: Option<agent::AgentEvent>| match e.map(|e| e.kind) {
        Some(EventKind::FileEdit { paths }) => paths,
        other => panic!("expected a file edit, got {other:?}"),
    };
    assert_eq!(paths(s.next_event().unwrap()), vec!["notes.txt"]);
    assert_eq!(paths(s.next_event().unwrap()), vec!["eval.sh"]);
    assert!(s.blocked().iter().any(|v| v.rule == RuleId::ProtectedEval));
    assert!(s.next_event().unwrap().is_none());
    std::thread::sleep(Duration::from_millis(1500));
    assert!(!root.join("after.txt").exists(), "agent kept running while blocked");
    fs::write(root.join("eval.sh"), "echo eval\n").unwrap();
    assert!(s.resume().unwrap());
    assert_eq!(paths(s.next_event().unwrap()), vec!["after.txt"]);
    assert_eq!(s.next_event().unwrap().map(|e| e.kind), Some(EventKind::SessionEnd));
}

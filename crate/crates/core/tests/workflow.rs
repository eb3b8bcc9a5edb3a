//! Workspace, ledger, guardrail and evaluation behaviour against real git
//! repositories.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::sync::Arc;
use std::thread;

use expharness::assets::Domain;
use expharness::evaluation::{self, TierSpec, TierStatus};
use expharness::guardrails::{self, check_protected, HookContext, UNLOCK_DIR};
use expharness::ledger::{self, Direction, Filter};
use expharness::workspace::{bootstrap_session, fill_project_section, init_workspace};
use expharness::{Error, ExperimentId, ProjectManifest, RuleId, Trigger, Workspace};

use common::{exh_ok, experiment, open, set_lr, toy_workspace};

fn id(n: u32) -> ExperimentId {
    ExperimentId::new(n).unwrap()
}

fn rules(e: &Error) -> Vec<RuleId> {
    match e {
        Error::Violations(vs) => vs.iter().map(|v| v.rule).collect(),
        _ => Vec::new(),
    }
}

#[test]
fn init_writes_domain_sections() {
    let dir = tempfile::tempdir().unwrap();
    let m = ProjectManifest::new("p", "Does it help?", &["val_ppl"]);
    let compute = init_workspace(&dir.path().join("c"), &m, Domain::Compute).unwrap();
    let text = fs::read_to_string(compute.join("INSTRUCTIONS.md")).unwrap();
    assert!(text.contains("### X. ") && text.contains("### C4. ") && !text.contains("### M1. "));
    let math = init_workspace(&dir.path().join("m"), &m, Domain::Math).unwrap();
    let text = fs::read_to_string(math.join("INSTRUCTIONS.md")).unwrap();
    assert!(text.contains("### M3. ") && !text.contains("### C1. "));
    let i = text.find("### I. ").unwrap();
    let x = text.find("### X. ").unwrap();
    assert!(i < x && x < text.find("### M1. ").unwrap());
}

#[test]
fn init_refuses_non_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("keep.txt"), "mine").unwrap();
    let m = ProjectManifest::new("p", "q", &["loss"]);
    assert!(matches!(init_workspace(dir.path(), &m, Domain::Compute), Err(Error::NotEmpty(_))));
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec!["keep.txt"]);
}

#[test]
fn project_section_fill() {
    let dir = tempfile::tempdir().unwrap();
    let ws = open(&toy_workspace(dir.path()));
    let before = fs::read_to_string(ws.instructions_path()).unwrap();
    let filled = fill_project_section(&ws, "Goal: beat AdamW baseline", false).unwrap();
    assert_eq!(filled.project_section.as_deref(), Some("Goal: beat AdamW baseline"));
    let after = fs::read_to_string(ws.instructions_path()).unwrap();
    let universal = |t: &str| t[..t.find("## Project instructions").unwrap()].to_string();
    assert_eq!(universal(&before), universal(&after));
    assert!(fill_project_section(&ws, "again", false).is_err());
    assert!(fill_project_section(&ws, "", true).is_err());
}

#[test]
fn bootstrap_fresh_and_after_two_experiments() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    let s = bootstrap_session(&open(&root)).unwrap();
    assert!(s.experiments.is_empty() && s.open_todos.is_empty() && s.pending_violations.is_empty());
    let a = experiment(&root, 1, None);
    let b = experiment(&root, 2, Some("E001"));
    let s = bootstrap_session(&open(&root)).unwrap();
    let ids: Vec<_> = s.experiments.iter().map(|r| (r.id, r.commit.clone())).collect();
    assert_eq!(ids, vec![(id(1), a.commit), (id(2), b.commit.clone())]);
    assert_eq!(s.last_commit, b.commit);
    assert_eq!(s.recorded_sections, vec![id(1), id(2)]);
}

#[test]
fn bootstrap_names_corrupted_commit() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    experiment(&root, 1, None);
    let git = open(&root).git();
    fs::write(root.join("scratch.txt"), "x").unwrap();
    git.add_all().unwrap();
    let bad = git.commit("exp(E002): broken -- loss=abc\n").unwrap();
    match bootstrap_session(&open(&root)) {
        Err(Error::Inconsistent(problems)) => {
            assert!(problems.iter().any(|p| p.contains(&bad[..7])), "{problems:?}")
        }
        other => panic!("expected inconsistency, got {other:?}"),
    }
}

#[test]
fn parallel_allocations_are_unique() {
    let dir = tempfile::tempdir().unwrap();
    let root = Arc::new(toy_workspace(dir.path()));
    let handles: Vec<_> = (0..100)
        .map(|_| {
            let root = Arc::clone(&root);
            thread::spawn(move || ledger::allocate_id(&Workspace::open(&root).unwrap()).unwrap())
        })
        .collect();
    let ids: BTreeSet<u32> = handles.into_iter().map(|h| h.join().unwrap().number()).collect();
    assert_eq!(ids, (1..=100).collect());
}

#[test]
fn allocation_sees_every_branch() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    for lr in 1..=4 {
        experiment(&root, lr, None);
    }
    let ws = open(&root);
    let wt = ledger::open_worktree(&ws, "muon-wd").unwrap();
    let side = open(&wt);
    for lr in 5..=7 {
        experiment(side.root(), lr, None);
    }
    assert_eq!(ledger::allocate_id(&ws).unwrap(), id(8));
    let all = ledger::query(&ws, &Filter::default()).unwrap();
    let branches: BTreeSet<_> = all.iter().map(|r| r.branch.as_str()).collect();
    assert_eq!(all.len(), 7);
    assert_eq!(branches, BTreeSet::from(["main", "muon-wd"]));
    let best = ledger::best_by(&ws, "val_loss", Direction::Minimize).unwrap().unwrap();
    assert_eq!(best.id, id(1));
}

#[test]
fn worktree_branch_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let ws = open(&toy_workspace(dir.path()));
    let wt = ledger::open_worktree(&ws, "ablation-wd").unwrap();
    assert_eq!(open(&wt).git().current_branch().unwrap(), "ablation-wd");
    assert!(matches!(ledger::open_worktree(&ws, "ablation-wd"), Err(Error::Conflict(_))));
}

#[test]
fn commit_requires_report_section() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    exh_ok(&root, &["exp", "begin", "no write-up"]);
    set_lr(&root, 2);
    for t in ["1", "2", "3"] {
        exh_ok(&root, &["tier", "run", t]);
    }
    let ws = open(&root);
    let err = ledger::commit_experiment(&ws, &ledger::draft_for(&ws, id(1)).unwrap()).unwrap_err();
    assert!(err.to_string().contains("Commandment IX"), "{err}");
}

#[test]
fn commit_refuses_tier_three_alone() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    exh_ok(&root, &["exp", "begin", "skip ahead"]);
    let ws = open(&root);
    let t3 = evaluation::run_tier(&ws, id(1), &TierSpec::from_manifest(ws.manifest(), 3).unwrap()).unwrap_err();
    assert_eq!(rules(&t3), vec![RuleId::TierOrder]);
    let mut draft = ledger::draft_for(&ws, id(1)).unwrap();
    draft.tier_results.insert(
        3,
        evaluation::TierResult {
            tier: 3,
            status: TierStatus::Pass,
            metrics: [("val_loss".to_string(), 3.0)].into(),
            log_path: "logs/E001/tier3.log".into(),
            wall_clock_s: 0.0,
        },
    );
    let err = ledger::commit_experiment(&ws, &draft).unwrap_err();
    assert!(err.to_string().contains("tier"), "{err}");
}

#[test]
fn filters_and_tags() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    experiment(&root, 1, None);
    exh_ok(&root, &["exp", "begin", "tagged", "--parent", "E001"]);
    set_lr(&root, 2);
    for t in ["1", "2", "3"] {
        exh_ok(&root, &["tier", "run", t]);
    }
    let args = common::record_args("Tagged", "val_loss=3.2");
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    exh_ok(&root, &args);
    exh_ok(&root, &["exp", "commit", "--tag", "milestone"]);
    let ws = open(&root);
    let tagged = ledger::query(
        &ws,
        &Filter {
            tag: Some("milestone".into()),
            ..Filter::default()
        },
    )
    .unwrap();
    assert_eq!(tagged.iter().map(|r| r.id).collect::<Vec<_>>(), vec![id(2)]);
    assert_eq!(tagged[0].parent, Some(id(1)));
}

#[test]
fn protected_edit_blocks_until_unlocked() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    let ws = open(&root);
    fs::write(root.join("eval.sh"), "echo cheat\n").unwrap();
    let vs = check_protected(&ws, &["eval.sh".into()]).unwrap();
    assert_eq!(vs.len(), 1);
    assert!(vs[0].detail.contains("Commandment II"));
    fs::write(root.join("train.sh"), common::TRAIN.replace("tier", "run")).unwrap();
    assert!(check_protected(&ws, &["train.sh".into()]).unwrap().is_empty());

    let digest = guardrails::current_digest(&root, "eval.sh").unwrap();
    fs::create_dir_all(root.join(UNLOCK_DIR)).unwrap();
    fs::write(
        root.join(UNLOCK_DIR).join("eval.unlock"),
        format!("path = \"eval.sh\"\ndigest = \"{digest}\"\nreason = \"fix off-by-one in the scorer\"\n"),
    )
    .unwrap();
    assert!(check_protected(&ws, &["eval.sh".into()]).unwrap().is_empty());
    assert_eq!(guardrails::read_lockfile(&ws).unwrap()["eval.sh"], digest);
    assert!(check_protected(&ws, &["eval.sh".into()]).unwrap().is_empty());
}

#[test]
fn pre_commit_flags_two_variable_change() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    experiment(&root, 1, None);
    exh_ok(&root, &["exp", "begin", "two at once", "--parent", "E001"]);
    fs::write(root.join("config.toml"), "lr = 2\nmomentum = 9\nwidth = 128\n").unwrap();
    let ws = open(&root);
    let ctx = HookContext {
        experiment: Some(id(2)),
        ..HookContext::default()
    };
    let vs = guardrails::run_hooks(&ws, Trigger::PreCommit, &ctx).unwrap();
    let one: Vec<_> = vs.iter().filter(|v| v.rule == RuleId::OneVariable).collect();
    assert_eq!(one.len(), 1, "{vs:?}");
    assert!(one[0].detail.contains("model") && one[0].detail.contains("optimizer"));
}

#[test]
fn failing_hook_command_blocks_with_log() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    let hooks = root.join("hooks.cfg");
    let mut cfg = fs::read_to_string(&hooks).unwrap();
    cfg.push_str("on experiment_run run sh -c 'echo unit tests failed; exit 3' severity=block\n");
    fs::write(&hooks, cfg).unwrap();
    let ws = open(&root);
    let vs = guardrails::run_hooks(&ws, Trigger::ExperimentRun, &HookContext::default()).unwrap();
    let cmd: Vec<_> = vs.iter().filter(|v| v.rule == RuleId::HookCommand).collect();
    assert_eq!(cmd.len(), 1, "{vs:?}");
    let detail = &cmd[0].detail;
    let at = detail.find("; log ").unwrap() + "; log ".len();
    let log = detail[at..].split(' ').next().unwrap();
    assert!(fs::read_to_string(root.join(log)).unwrap().contains("unit tests failed"));
}

#[test]
fn tier_budget_times_out_and_keeps_log() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    exh_ok(&root, &["exp", "begin", "slow"]);
    let ws = open(&root);
    let spec = TierSpec {
        tier: 1,
        command: "echo started; sleep 5".into(),
        budget_s: Some(1),
        metric_parsers: Vec::new(),
    };
    let r = evaluation::run_tier(&ws, id(1), &spec).unwrap();
    assert_eq!(r.status, TierStatus::Timeout);
    assert!(r.wall_clock_s < 4.0);
    assert!(fs::read_to_string(root.join(&r.log_path)).unwrap().contains("started"));
}

#[test]
fn promotion_uses_tier_three_values() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_workspace(dir.path());
    let rec = experiment(&root, 7, None);
    assert_eq!(rec.metric("val_loss"), Some(3.7));
    let results = evaluation::latest_results(&open(&root), id(1)).unwrap();
    assert_eq!(evaluation::promote(&results).unwrap(), rec.tier_results[&3].metrics);
    let mut partial = results.clone();
    partial.remove(&3);
    assert!(evaluation::promote(&partial).is_err());
}

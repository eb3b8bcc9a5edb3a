//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use expharness::assets::Domain;
use expharness::workspace::{init_workspace_with, InitOptions};
use expharness::{ProjectManifest, Workspace};

pub const MANIFEST: &str = r#"
name = "toy"
research_question = "Does a smaller learning rate lower val loss?"
metric_names = ["val_loss"]
protected_paths = ["eval.sh"]

[[tiers]]
tier = 1
command = "sh train.sh 1"

[[tiers]]
tier = 2
command = "sh train.sh 2"

[[tiers]]
tier = 3
command = "sh train.sh 3"

[variables]
config_files = ["config.toml"]

[variables.groups]
optimizer = ["lr", "momentum"]
model = ["width"]
"#;

pub const TRAIN: &str = r#"lr=$(sed -n 's/^lr = //p' config.toml 2>/dev/null)
echo "tier $1 lr=${lr:-none}"
echo "val_loss=3.${lr:-5}"
"#;

/// A fresh toy workspace at `dir/ws`.
pub fn toy_workspace(dir: &Path) -> PathBuf {
    let project = dir.join("project");
    fs::create_dir_all(&project).unwrap();
    fs::write(project.join("train.sh"), TRAIN).unwrap();
    fs::write(project.join("eval.sh"), "echo eval\n").unwrap();
    fs::write(project.join("config.toml"), "lr = 5\nmomentum = 9\nwidth = 64\n").unwrap();
    let manifest = ProjectManifest::parse(MANIFEST).unwrap();
    let opts = InitOptions {
        import: Some(project),
    };
    init_workspace_with(&dir.join("ws"), &manifest, Domain::Compute, &opts).unwrap()
}

pub fn open(root: &Path) -> Workspace {
    Workspace::open(root).unwrap()
}

/// Run the CLI in-process; returns (exit code, stdout, stderr).
pub fn exh(root: &Path, args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv: Vec<String> = vec!["exh".into(), "-C".into(), root.to_string_lossy().into_owned()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let code = expharness::cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
}

/// Like [`exh`] but panics unless the exit code is 0.
pub fn exh_ok(root: &Path, args: &[&str]) -> String {
    let (code, out, err) = exh(root, args);
    assert_eq!(code, 0, "exh {args:?} failed\nstdout:\n{out}\nstderr:\n{err}");
    out
}

/// Set `lr` in the toy config.
pub fn set_lr(root: &Path, lr: u32) {
    let p = root.join("config.toml");
    let text = fs::read_to_string(&p).unwrap();
    let updated: Vec<String> = text
        .lines()
        .map(|l| if l.starts_with("lr = ") { format!("lr = {lr}") } else { l.to_string() })
        .collect();
    fs::write(&p, updated.join("\n") + "\n").unwrap();
}

/// Record args for a complete seven-field section.
pub fn record_args(title: &str, metric: &str) -> Vec<String> {
    let mut v: Vec<String> = vec!["exp".into(), "record".into()];
    for (flag, body) in [
        ("--title", title),
        ("--goal", "Lower validation loss."),
        ("--hypothesis", "A different learning rate converges better."),
        ("--method", "Change lr only and run all three tiers."),
        ("--implementation", "Edited config.toml."),
        ("--results", "Tier 3 finished."),
        ("--analysis", "Within noise of the parent."),
        ("--next-steps", "Try momentum next."),
    ] {
        v.push(flag.into());
        v.push(body.into());
    }
    v.push("--result".into());
    v.push(format!("3:{metric}"));
    v
}

/// Begin, edit `lr`, pass all tiers, record and commit one experiment.
pub fn experiment(root: &Path, lr: u32, parent: Option<&str>) -> expharness::ExperimentRecord {
    let mut begin = vec!["exp", "begin", "change lr"];
    if let Some(p) = parent {
        begin.extend(["--parent", p]);
    }
    exh_ok(root, &begin);
    set_lr(root, lr);
    for t in ["1", "2", "3"] {
        exh_ok(root, &["tier", "run", t]);
    }
    let args = record_args("Change lr", &format!("val_loss=3.{lr}"));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    exh_ok(root, &args);
    let ws = open(root);
    let plans = expharness::ledger::open_plans(&ws).unwrap();
    let id = plans.last().expect("open plan").id;
    let draft = expharness::ledger::draft_for(&ws, id).unwrap();
    expharness::ledger::commit_experiment(&ws, &draft).unwrap()
}

//! Process supervision with real child processes.

use std::fs;
use std::thread::sleep;
use std::time::{Duration, Instant};

use expharness::manifest::SandboxConfig;
use expharness::supervisor::{self, running_processes, spawn, spawn_with, wait_idle, ProcessState, SandboxPolicy, SpawnOptions};

fn policy(root: &std::path::Path) -> SandboxPolicy {
    SandboxPolicy::for_workspace(root, &SandboxConfig::default())
}

#[test]
fn log_grows_while_running() {
    let dir = tempfile::tempdir().unwrap();
    let p = spawn(
        &policy(dir.path()),
        "for i in 1 2 3 4 5 6; do echo tick $i; sleep 0.2; done",
        "logs/grow.log".as_ref(),
    )
    .unwrap();
    let mut sizes = Vec::new();
    while !p.poll().unwrap().is_terminal() {
        sizes.push(fs::metadata(p.log_path()).unwrap().len());
        sleep(Duration::from_millis(150));
    }
    assert!(sizes.len() >= 3);
    assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
    assert!(sizes.first() < sizes.last());
    assert_eq!(p.poll().unwrap(), ProcessState::Exited(0));
}

#[test]
fn wait_idle_returns_near_exit_and_counts_idle_time() {
    let dir = tempfile::tempdir().unwrap();
    let pol = policy(dir.path());
    let slow = spawn(&pol, "sleep 10", "logs/slow.log".as_ref()).unwrap();
    let quick = spawn(&pol, "sleep 3", "logs/quick.log".as_ref()).unwrap();
    let idle = dir.path().join("logs/idle");
    let t = Instant::now();
    let i = wait_idle(&[&slow, &quick], Duration::from_secs(1), Some(&idle)).unwrap();
    let waited = t.elapsed();
    assert_eq!(i, 1);
    assert!(waited >= Duration::from_millis(2900) && waited <= Duration::from_millis(4200), "{waited:?}");
    assert!(supervisor::read_idle(&idle) >= 2.9);
    slow.kill(supervisor::KillReason::Requested).unwrap();
    assert!(wait_idle(&[], Duration::from_millis(10), None).is_err());
}

#[test]
fn registry_lists_running_processes() {
    let dir = tempfile::tempdir().unwrap();
    let registry = dir.path().join("logs/processes");
    let opts = SpawnOptions {
        registry: Some(registry.clone()),
        ..SpawnOptions::default()
    };
    let p = spawn_with(&policy(dir.path()), "sleep 1", "logs/r.log".as_ref(), &opts).unwrap();
    let running = running_processes(&registry);
    assert_eq!(running.iter().map(|r| r.pid).collect::<Vec<_>>(), vec![p.pid()]);
    p.wait().unwrap();
    assert!(running_processes(&registry).is_empty());
}

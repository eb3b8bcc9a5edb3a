//! Local GPU allocation (one experiment per GPU) and dispatch of independent
//! experiments to remote nodes.

mod nodelist;
mod remote;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use nodelist::{expand_nodelist, NodelistError, MAX_HOSTS};
pub use remote::{
    parse_wire, DispatchHandle, Dispatcher, FakeTransport, Fault, HandleStatus, RemoteStatus, SshTransport,
    Transport,
};

use crate::error::{Error, Result};
use crate::ledger::ExperimentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotState {
    Free,
    /// Busy with a known experiment, or with something the probe saw.
    Busy(Option<ExperimentId>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuSlot {
    pub index: u32,
    pub state: SlotState,
    pub memory_used_mib: u64,
    pub utilization: u32,
    /// Seconds since the epoch.
    pub last_probe: u64,
}

impl GpuSlot {
    pub fn is_free(&self) -> bool {
        self.state == SlotState::Free
    }
}

/// Parse probe output: one line per GPU, `index, memory-used, utilization`
/// with an optional fourth column counting attached processes. A GPU with
/// nonzero utilization or processes is busy.
pub fn probe_gpus(output: &str) -> Result<Vec<GpuSlot>> {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut slots: Vec<GpuSlot> = Vec::new();
    for (n, line) in output.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: &str| Error::Invalid(format!("GPU probe line {}: {why}: `{line}`", n + 1));
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(bad("expected `index, memory-used, utilization[, processes]`"));
        }
        let num = |s: &str| s.trim_end_matches(" MiB").trim_end_matches(" %").parse::<u64>();
        let index = num(cols[0]).map_err(|_| bad("index is not a number"))? as u32;
        let mem = num(cols[1]).map_err(|_| bad("memory is not a number"))?;
        let util = num(cols[2]).map_err(|_| bad("utilization is not a number"))?;
        if util > 100 {
            return Err(bad("utilization above 100"));
        }
        let procs = match cols.get(3) {
            Some(p) => num(p).map_err(|_| bad("process count is not a number"))?,
            None => 0,
        };
        if slots.iter().any(|s| s.index == index) {
            return Err(bad("duplicate GPU index"));
        }
        slots.push(GpuSlot {
            index,
            state: if util > 0 || procs > 0 { SlotState::Busy(None) } else { SlotState::Free },
            memory_used_mib: mem,
            utilization: util as u32,
            last_probe: now,
        });
    }
    if slots.is_empty() {
        return Err(Error::Invalid("GPU probe reported no GPUs".into()));
    }
    slots.sort_by_key(|s| s.index);
    Ok(slots)
}

/// Run the probe command and parse its output.
pub fn run_probe(command: &str) -> Result<Vec<GpuSlot>> {
    let out = std::process::Command::new("sh")
        .arg("-c")
        .arg(command)
        .output()
        .map_err(|e| Error::Invalid(format!("GPU probe `{command}`: {e}")))?;
    if !out.status.success() {
        return Err(Error::Invalid(format!(
            "GPU probe `{command}` failed: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    probe_gpus(&String::from_utf8_lossy(&out.stdout))
}

/// A unit of dispatchable work, pinned to a committed snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: ExperimentId,
    pub snapshot: String,
    pub command: String,
    pub gpus: u32,
    pub depends_on: Vec<ExperimentId>,
    pub image: Option<String>,
}

impl JobSpec {
    /// Dependencies not yet complete.
    pub fn pending_dependencies(&self, completed: &BTreeSet<ExperimentId>) -> Vec<ExperimentId> {
        self.depends_on.iter().filter(|d| !completed.contains(d)).copied().collect()
    }

    pub fn is_ready(&self, completed: &BTreeSet<ExperimentId>) -> bool {
        self.pending_dependencies(completed).is_empty()
    }

    /// Line-oriented `key: value` block ending in a blank line.
    pub fn to_wire(&self) -> String {
        let deps: Vec<String> = self.depends_on.iter().map(|d| d.to_string()).collect();
        format!(
            "id: {}\nsnapshot: {}\ncmd: {}\ngpus: {}\nimage: {}\ndepends: {}\n\n",
            self.id,
            self.snapshot,
            self.command,
            self.gpus,
            self.image.as_deref().unwrap_or(""),
            deps.join(",")
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.gpus == 0 {
            return Err(Error::Invalid(format!("{}: a job needs at least one GPU", self.id)));
        }
        if self.snapshot.len() < 7 || !self.snapshot.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(Error::Invalid(format!("{}: snapshot must be a commit hash", self.id)));
        }
        if self.command.trim().is_empty() || self.command.contains('\n') {
            return Err(Error::Invalid(format!("{}: command must be one non-empty line", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub job: ExperimentId,
    pub slots: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Allocation {
    pub assignments: Vec<Assignment>,
    /// Jobs still waiting, in queue order.
    pub remaining: Vec<JobSpec>,
    /// Jobs that need more GPUs than any node has; dropped from the queue.
    pub unsatisfiable: Vec<ExperimentId>,
}

/// Greedy allocation in queue order. A ready job takes the lowest free
/// indices; jobs with incomplete dependencies are skipped, not blocking the
/// jobs behind them.
pub fn allocate(queue: &[JobSpec], slots: &[GpuSlot], completed: &BTreeSet<ExperimentId>, max_gpus: u32) -> Allocation {
    let mut free: Vec<u32> = slots.iter().filter(|s| s.is_free()).map(|s| s.index).collect();
    free.sort_unstable();
    let mut out = Allocation::default();
    for job in queue {
        if job.gpus > max_gpus || job.gpus == 0 {
            out.unsatisfiable.push(job.id);
        } else if job.is_ready(completed) && job.gpus as usize <= free.len() {
            let taken: Vec<u32> = free.drain(..job.gpus as usize).collect();
            out.assignments.push(Assignment { job: job.id, slots: taken });
        } else {
            out.remaining.push(job.clone());
        }
    }
    out
}

/// Local scheduler state for one workspace.
#[derive(Debug, Clone, Default)]
pub struct Scheduler {
    pub slots: Vec<GpuSlot>,
    pub queue: Vec<JobSpec>,
    pub running: BTreeMap<ExperimentId, Vec<u32>>,
    pub completed: BTreeSet<ExperimentId>,
    pub unsatisfiable: Vec<ExperimentId>,
}

impl Scheduler {
    pub fn new(slots: Vec<GpuSlot>) -> Self {
        Scheduler {
            slots,
            ..Scheduler::default()
        }
    }

    pub fn submit(&mut self, job: JobSpec) -> Result<()> {
        let known = self.queue.iter().any(|j| j.id == job.id)
            || self.running.contains_key(&job.id)
            || self.completed.contains(&job.id);
        if known {
            return Err(Error::Conflict(format!("{} is already scheduled", job.id)));
        }
        self.queue.push(job);
        Ok(())
    }

    /// Allocate free slots to ready jobs and mark them busy.
    pub fn step(&mut self) -> Vec<Assignment> {
        let max = self.slots.len() as u32;
        let a = allocate(&self.queue, &self.slots, &self.completed, max);
        for asg in &a.assignments {
            for idx in &asg.slots {
                let slot = self.slots.iter_mut().find(|s| s.index == *idx).expect("slot exists");
                debug_assert!(slot.is_free());
                slot.state = SlotState::Busy(Some(asg.job));
            }
            self.running.insert(asg.job, asg.slots.clone());
        }
        self.queue = a.remaining;
        self.unsatisfiable.extend(a.unsatisfiable);
        a.assignments
    }

    /// Release a running job's slots; `success` marks it complete for its
    /// dependents.
    pub fn finish(&mut self, id: ExperimentId, success: bool) -> Result<()> {
        let slots = self
            .running
            .remove(&id)
            .ok_or_else(|| Error::NotFound(format!("{id} is not running")))?;
        for idx in slots {
            if let Some(s) = self.slots.iter_mut().find(|s| s.index == idx) {
                s.state = SlotState::Free;
            }
        }
        if success {
            self.completed.insert(id);
        }
        Ok(())
    }

    /// True when some free slot could serve a ready queued job.
    pub fn violates_work_conservation(&self) -> bool {
        let free = self.slots.iter().filter(|s| s.is_free()).count() as u32;
        self.queue.iter().any(|j| j.is_ready(&self.completed) && j.gpus <= free)
    }

    /// True when two running jobs share a slot.
    pub fn double_booked(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.running.values().flatten().any(|i| !seen.insert(*i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeState {
    Up,
    Down,
    Busy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub hostname: String,
    pub gpus: u32,
    pub state: NodeState,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NodeInventory {
    pub nodes: Vec<Node>,
}

impl NodeInventory {
    /// Inventory from a nodelist expression; duplicate hosts are an error.
    pub fn from_nodelist(expr: &str, gpus_per_node: u32) -> Result<Self> {
        let hosts = expand_nodelist(expr).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut seen = BTreeSet::new();
        let mut nodes = Vec::new();
        for h in hosts {
            if !seen.insert(h.clone()) {
                return Err(Error::Invalid(format!("host `{h}` listed twice")));
            }
            nodes.push(Node {
                hostname: h,
                gpus: gpus_per_node,
                state: NodeState::Up,
            });
        }
        Ok(NodeInventory { nodes })
    }

    /// Inventory from the environment variable named in the manifest.
    pub fn discover(env_var: &str, gpus_per_node: u32) -> Result<Self> {
        match std::env::var(env_var) {
            Ok(v) if !v.trim().is_empty() => Self::from_nodelist(v.trim(), gpus_per_node),
            _ => Err(Error::NotFound(format!("${env_var} is not set; no multi-node allocation is active"))),
        }
    }

    pub fn get(&self, host: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.hostname == host)
    }
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeState::Up => "up",
            NodeState::Down => "down",
            NodeState::Busy => "busy",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(n: u32) -> ExperimentId {
        ExperimentId::new(n).unwrap()
    }

    fn job(n: u32, gpus: u32, deps: &[u32]) -> JobSpec {
        JobSpec {
            id: id(n),
            snapshot: "0123456789abcdef0123456789abcdef01234567".into(),
            command: "python train.py".into(),
            gpus,
            depends_on: deps.iter().map(|d| id(*d)).collect(),
            image: None,
        }
    }

    const IDLE4: &str = "0, 0, 0\n1, 0, 0\n2, 0, 0\n3, 0, 0\n";

    #[test]
    fn probe_fixtures() {
        let slots = probe_gpus(IDLE4).unwrap();
        assert_eq!(slots.len(), 4);
        assert!(slots.iter().all(GpuSlot::is_free));
        let slots = probe_gpus("0, 0, 0, 0\n1, 10, 0, 0\n2, 20000, 0, 1\n3, 0, 0, 0\n").unwrap();
        assert_eq!(slots[2].state, SlotState::Busy(None));
        assert!(slots[1].is_free());
        assert!(probe_gpus("NVIDIA-SMI has failed").is_err());
        assert!(probe_gpus("").is_err());
    }

    #[test]
    fn capacity_and_dependencies() {
        let slots = probe_gpus(IDLE4).unwrap();
        let queue: Vec<JobSpec> = (1..=6).map(|n| job(n, 1, &[])).collect();
        let a = allocate(&queue, &slots, &BTreeSet::new(), 4);
        assert_eq!(a.assignments.len(), 4);
        assert_eq!(a.remaining.len(), 2);

        let queue = vec![job(8, 1, &[7]), job(9, 1, &[])];
        let one = probe_gpus("0, 0, 0\n").unwrap();
        let a = allocate(&queue, &one, &BTreeSet::new(), 1);
        assert_eq!(a.assignments, vec![Assignment { job: id(9), slots: vec![0] }]);
        assert_eq!(a.remaining[0].id, id(8));

        let a = allocate(&[job(1, 5, &[])], &slots, &BTreeSet::new(), 4);
        assert_eq!(a.unsatisfiable, vec![id(1)]);
    }

    #[test]
    fn wire_roundtrip() {
        let j = job(12, 2, &[3, 4]);
        assert_eq!(parse_wire(&j.to_wire()).unwrap(), j);
    }
}

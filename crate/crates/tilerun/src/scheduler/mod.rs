//! Pluggable placement policies mapping ready tasks to modeled devices.
//!
//! Policies are pure: they look at the task, the device states and the
//! residency view, and return a [`ScheduleDecision`]. All mutation
//! (queues, transfers, clocks) lives in the simulation loop in [`sim`].

pub mod sim;

use serde::{Deserialize, Serialize};

use crate::runtime::{AccessMode, TaskId, TileHandle};

/// Built-in policy selection (CLI `--policy`).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// FIFO over ready tasks, first idle device, round-robin tiebreak.
    EagerFifo,
    /// Earliest-completion-time greedy with data-locality awareness.
    GreedyEct,
}

impl PolicyKind {
    pub fn build(self) -> Box<dyn SchedulePolicy + Send> {
        match self {
            PolicyKind::EagerFifo => Box::new(EagerFifo),
            PolicyKind::GreedyEct => Box::new(GreedyEct),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "eager" | "eager-fifo" => Some(PolicyKind::EagerFifo),
            "greedy-ect" | "greedy" => Some(PolicyKind::GreedyEct),
            _ => None,
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolicyKind::EagerFifo => write!(f, "eager"),
            PolicyKind::GreedyEct => write!(f, "greedy-ect"),
        }
    }
}

/// Snapshot of one device as a policy sees it.
#[derive(Clone, Copy, Debug)]
pub struct DeviceState {
    pub id: usize,
    pub speed: f64,
    /// Bytes/s to main store; None = direct access (no transfer cost).
    pub bandwidth: Option<f64>,
    /// Virtual time when the device finishes everything already
    /// committed to it.
    pub available_at: f64,
    /// Idle right now (nothing running, nothing queued).
    pub idle: bool,
}

/// What a policy sees of one ready task.
#[derive(Clone, Copy, Debug)]
pub struct TaskView<'a> {
    pub id: TaskId,
    pub cost_hint: u64,
    pub accesses: &'a [(TileHandle, AccessMode)],
    pub working_set_bytes: u64,
    pub ready_at: f64,
}

/// Residency facts a policy may query; implemented by the memory manager.
pub trait ResidencyView {
    fn missing_bytes(&self, device: usize, tile: TileHandle) -> u64;
    fn fits_device(&self, device: usize, working_set: u64) -> bool;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleDecision {
    pub task: TaskId,
    pub device: usize,
    pub predicted_start: f64,
    pub predicted_end: f64,
    pub predicted_transfer_bytes: u64,
}

/// Context the simulation passes along with each pick.
#[derive(Clone, Copy, Debug)]
pub struct PickContext {
    pub now: f64,
    /// Round-robin cursor for idle-device tie-breaking.
    pub rr_cursor: usize,
}

/// A placement policy. The two built-ins are small enough to be pure
/// functions; richer policies (e.g. ones that study the whole submitted
/// graph before placing anything) can hook `observe_epoch`.
pub trait SchedulePolicy {
    fn name(&self) -> &'static str;

    /// Picks a device for one ready task, or None when no device can
    /// ever host it.
    fn pick_device(
        &self,
        task: &TaskView<'_>,
        devices: &[DeviceState],
        residency: &dyn ResidencyView,
        ctx: &PickContext,
    ) -> Option<ScheduleDecision>;

    /// Whether ready tasks are committed to a device queue immediately
    /// (completion-time style) or held until some device idles (eager).
    fn commits_on_ready(&self) -> bool;

    /// Tiles worth prefetching onto the decided device ahead of the
    /// task's start. Only meaningful for committing policies.
    fn prefetch_requests(
        &self,
        decision: &ScheduleDecision,
        task: &TaskView<'_>,
        residency: &dyn ResidencyView,
    ) -> Vec<TileHandle> {
        let _ = (decision, task, residency);
        Vec::new()
    }

    /// Extension point for whole-graph policies: called once per epoch
    /// with (task id, cost hint, predecessor ids) triples before any
    /// placement happens. The built-in greedy heuristics ignore it.
    fn observe_epoch(&mut self, _tasks: &[(TaskId, u64, Vec<TaskId>)]) {}
}

/// Transfer-time estimate for the tiles a task would have to pull onto
/// a device. Write-only tiles cost nothing (no data is fetched).
fn transfer_estimate(
    task: &TaskView<'_>,
    dev: &DeviceState,
    residency: &dyn ResidencyView,
) -> (u64, f64) {
    let mut bytes = 0u64;
    for (h, mode) in task.accesses {
        match mode {
            AccessMode::Read | AccessMode::ReadWrite => {
                bytes += residency.missing_bytes(dev.id, *h);
            }
            AccessMode::Write | AccessMode::Reduce => {}
        }
    }
    let secs = match dev.bandwidth {
        Some(bw) => bytes as f64 / bw,
        None => 0.0,
    };
    (bytes, secs)
}

pub struct EagerFifo;

impl SchedulePolicy for EagerFifo {
    fn name(&self) -> &'static str {
        "eager"
    }

    fn pick_device(
        &self,
        task: &TaskView<'_>,
        devices: &[DeviceState],
        residency: &dyn ResidencyView,
        ctx: &PickContext,
    ) -> Option<ScheduleDecision> {
        let n = devices.len();
        for offset in 0..n {
            let dev = &devices[(ctx.rr_cursor + offset) % n];
            if !dev.idle || !residency.fits_device(dev.id, task.working_set_bytes) {
                continue;
            }
            let (bytes, transfer) = transfer_estimate(task, dev, residency);
            let start = ctx.now.max(task.ready_at);
            return Some(ScheduleDecision {
                task: task.id,
                device: dev.id,
                predicted_start: start,
                predicted_end: start + transfer + task.cost_hint as f64 / dev.speed,
                predicted_transfer_bytes: bytes,
            });
        }
        None
    }

    fn commits_on_ready(&self) -> bool {
        false
    }
}

pub struct GreedyEct;

impl SchedulePolicy for GreedyEct {
    fn name(&self) -> &'static str {
        "greedy-ect"
    }

    fn pick_device(
        &self,
        task: &TaskView<'_>,
        devices: &[DeviceState],
        residency: &dyn ResidencyView,
        ctx: &PickContext,
    ) -> Option<ScheduleDecision> {
        let mut best: Option<ScheduleDecision> = None;
        for dev in devices {
            if !residency.fits_device(dev.id, task.working_set_bytes) {
                continue;
            }
            let (bytes, transfer) = transfer_estimate(task, dev, residency);
            let avail = dev.available_at.max(ctx.now).max(task.ready_at);
            let end = avail + transfer + task.cost_hint as f64 / dev.speed;
            // Strictly-better comparison keeps the lowest device id on ties.
            if best.as_ref().map_or(true, |b| end < b.predicted_end) {
                best = Some(ScheduleDecision {
                    task: task.id,
                    device: dev.id,
                    predicted_start: avail,
                    predicted_end: end,
                    predicted_transfer_bytes: bytes,
                });
            }
        }
        best
    }

    fn commits_on_ready(&self) -> bool {
        true
    }

    fn prefetch_requests(
        &self,
        decision: &ScheduleDecision,
        task: &TaskView<'_>,
        residency: &dyn ResidencyView,
    ) -> Vec<TileHandle> {
        let mut out = Vec::new();
        for (h, mode) in task.accesses {
            if matches!(mode, AccessMode::Read | AccessMode::ReadWrite)
                && residency.missing_bytes(decision.device, *h) > 0
                && !out.contains(h)
            {
                out.push(*h);
            }
        }
        out
    }
}

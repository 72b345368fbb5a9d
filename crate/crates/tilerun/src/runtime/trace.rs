//! Schedule trace: one record per task on the virtual clock, residency
//! counter events, prefetch directives and per-epoch summaries. The
//! whole thing exports as a Chrome trace-event file for timeline viewers.

use std::io::Write;

use serde_json::json;

use crate::devices::{ResidencyEvent, Topology};
use crate::error::Result;
use crate::runtime::{TaskId, TileId};

/// One executed task. Timestamps are virtual nanoseconds.
#[derive(Clone, Debug)]
pub struct TaskTraceRecord {
    pub task: TaskId,
    pub kernel: String,
    pub device: usize,
    /// When the task's last predecessor finished.
    pub ready_ns: u64,
    /// When the scheduler bound it to the device.
    pub place_ns: u64,
    /// When compute began (transfers done, device free).
    pub start_ns: u64,
    pub end_ns: u64,
    /// Bytes moved on the task's behalf (fetches plus writebacks).
    pub bytes_moved: u64,
}

/// A prefetch directive the scheduler issued (or declined).
#[derive(Clone, Copy, Debug)]
pub struct PrefetchRecord {
    /// The task the prefetch was issued for.
    pub task: TaskId,
    pub device: usize,
    pub tile: TileId,
    pub at: f64,
    pub started: bool,
    /// True when the directive targeted an already-resident tile
    /// (the greedy policy is expected never to produce these).
    pub was_resident: bool,
}

#[derive(Clone, Debug)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Virtual seconds from epoch start to the last task end.
    pub makespan: f64,
    pub bytes_moved: u64,
    /// Longest cost-hint chain divided by the fastest device speed.
    pub critical_path_lower_bound: f64,
    pub device_busy: Vec<f64>,
    pub device_tasks: Vec<usize>,
}

impl EpochSummary {
    pub fn utilization(&self, device: usize) -> f64 {
        if self.makespan > 0.0 {
            self.device_busy[device] / self.makespan
        } else {
            0.0
        }
    }
}

#[derive(Default)]
pub struct RunTrace {
    pub tasks: Vec<TaskTraceRecord>,
    pub prefetches: Vec<PrefetchRecord>,
    pub residency: Vec<ResidencyEvent>,
    pub summaries: Vec<EpochSummary>,
}

impl RunTrace {
    pub fn total_bytes_moved(&self) -> u64 {
        self.summaries.iter().map(|s| s.bytes_moved).sum()
    }

    pub fn total_makespan(&self) -> f64 {
        self.summaries.iter().map(|s| s.makespan).sum()
    }

    /// Writes the Chrome trace-event JSON (view in chrome://tracing or
    /// Perfetto). Durations map virtual nanoseconds onto microsecond
    /// units, the format's native resolution.
    pub fn write_chrome_trace(&self, topology: &Topology, mut w: impl Write) -> Result<()> {
        let mut events = Vec::new();
        for d in &topology.devices {
            events.push(json!({
                "name": "thread_name",
                "ph": "M",
                "pid": 0,
                "tid": d.id,
                "args": {"name": format!("device {} ({:?}, speed {})", d.id, d.kind, d.speed)},
            }));
        }
        for rec in &self.tasks {
            events.push(json!({
                "name": rec.kernel,
                "cat": "task",
                "ph": "X",
                "ts": rec.start_ns as f64 / 1e3,
                "dur": (rec.end_ns - rec.start_ns) as f64 / 1e3,
                "pid": 0,
                "tid": rec.device,
                "args": {
                    "task": rec.task,
                    "ready_ns": rec.ready_ns,
                    "place_ns": rec.place_ns,
                    "start_ns": rec.start_ns,
                    "end_ns": rec.end_ns,
                    "bytes_moved": rec.bytes_moved,
                },
            }));
        }
        for ev in &self.residency {
            events.push(json!({
                "name": format!("device {} resident bytes", ev.device),
                "ph": "C",
                "ts": (ev.at * 1e9) / 1e3,
                "pid": 0,
                "tid": ev.device,
                "args": {"bytes_used": ev.bytes_used},
            }));
        }
        serde_json::to_writer(&mut w, &json!({"traceEvents": events}))?;
        Ok(())
    }
}

//! Deterministic virtual-time scheduling of one epoch of tasks.
//!
//! The simulation walks the epoch's DAG with a discrete-event loop:
//! placement decisions come from the policy, transfers and residency
//! from the memory manager, and each task gets a (device, start, end)
//! assignment on the modeled clock. Real execution then follows the
//! per-device queues this produces. Everything here is single-threaded
//! and ordered, so schedules and traces replay exactly.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use crate::devices::{MemoryManager, PrefetchOutcome, Topology};
use crate::error::{Error, Result};
use crate::runtime::trace::{PrefetchRecord, RunTrace, TaskTraceRecord};
use crate::runtime::{RunOptions, TaskBody, TaskId, TaskRecord};
use crate::scheduler::{
    DeviceState, PickContext, ResidencyView, SchedulePolicy, TaskView,
};

/// Totally ordered wrapper for event times (no NaNs by construction).
#[derive(Clone, Copy, PartialEq, Debug)]
struct TimeKey(f64);

impl Eq for TimeKey {}

impl PartialOrd for TimeKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TimeKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl ResidencyView for MemoryManager {
    fn missing_bytes(&self, device: usize, tile: crate::runtime::TileHandle) -> u64 {
        MemoryManager::missing_bytes(self, device, tile)
    }

    fn fits_device(&self, device: usize, working_set: u64) -> bool {
        MemoryManager::fits_device(self, device, working_set)
    }
}

/// Output of scheduling one epoch: placements and per-device execution
/// order for the worker pool, plus the schedule metrics.
pub(crate) struct EpochPlan {
    /// Device per task, indexed by `task_id - base`.
    pub device_of: Vec<usize>,
    /// Real-execution order per device (ascending virtual start).
    pub device_queues: Vec<Vec<TaskId>>,
    pub makespan: f64,
    pub bytes_moved: u64,
    pub critical_path_lower_bound: f64,
    pub device_busy: Vec<f64>,
    pub device_tasks: Vec<usize>,
}

/// Persistent scheduling state: virtual clocks, residency, policy.
pub(crate) struct SimState {
    topology: Topology,
    memory: MemoryManager,
    policy: Box<dyn SchedulePolicy + Send>,
    /// Virtual completion time of the task currently running per device.
    free_at: Vec<f64>,
    /// Predicted completion of everything committed per device.
    avail_at: Vec<f64>,
    vnow: f64,
    rr_cursor: usize,
}

impl SimState {
    pub fn new(topology: Topology, options: &RunOptions) -> Self {
        let n = topology.len();
        let memory = MemoryManager::new(&topology, options.offload, options.record_trace);
        SimState {
            topology,
            memory,
            policy: options.policy.build(),
            free_at: vec![0.0; n],
            avail_at: vec![0.0; n],
            vnow: 0.0,
            rr_cursor: 0,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn now(&self) -> f64 {
        self.vnow
    }

    pub fn invalidate_tile(&mut self, tile: crate::runtime::TileId) {
        self.memory.invalidate_everywhere(tile);
    }

    fn device_states(&self) -> Vec<DeviceState> {
        self.topology
            .devices
            .iter()
            .map(|d| DeviceState {
                id: d.id,
                speed: d.speed,
                bandwidth: d.bandwidth_to_main,
                available_at: self.avail_at[d.id],
                idle: self.free_at[d.id] <= self.vnow && self.avail_at[d.id] <= self.vnow,
            })
            .collect()
    }

    pub fn plan_epoch(
        &mut self,
        base: usize,
        tasks: &[TaskRecord],
        options: &RunOptions,
        trace: &mut RunTrace,
    ) -> Result<EpochPlan> {
        let mut run = EpochRun::new(self, base, tasks, options, trace);
        run.drive()?;
        Ok(run.finish())
    }
}

/// One epoch's scheduling pass.
struct EpochRun<'a> {
    sim: &'a mut SimState,
    base: usize,
    tasks: &'a [TaskRecord],
    options: &'a RunOptions,
    trace: &'a mut RunTrace,
    epoch_start: f64,
    remaining_preds: Vec<usize>,
    ready_at: Vec<f64>,
    /// Eager: ready tasks not yet placed. Greedy: unused.
    pool: VecDeque<TaskId>,
    /// Greedy: committed FIFO per device.
    queues: Vec<VecDeque<TaskId>>,
    events: BinaryHeap<Reverse<(TimeKey, TaskId)>>,
    plan: EpochPlan,
    bytes_at_start: u64,
    done: usize,
    max_end: f64,
}

impl<'a> EpochRun<'a> {
    fn new(
        sim: &'a mut SimState,
        base: usize,
        tasks: &'a [TaskRecord],
        options: &'a RunOptions,
        trace: &'a mut RunTrace,
    ) -> Self {
        let n = tasks.len();
        let ndev = sim.topology.len();
        let epoch_start = sim.vnow;
        let remaining_preds = tasks
            .iter()
            .map(|t| t.preds.iter().filter(|&&p| p >= base).count())
            .collect();
        let bytes_at_start = sim.memory.total_bytes_moved;
        EpochRun {
            sim,
            base,
            tasks,
            options,
            trace,
            epoch_start,
            remaining_preds,
            ready_at: vec![epoch_start; n],
            pool: VecDeque::new(),
            queues: vec![VecDeque::new(); ndev],
            events: BinaryHeap::new(),
            plan: EpochPlan {
                device_of: vec![usize::MAX; n],
                device_queues: vec![Vec::new(); ndev],
                makespan: 0.0,
                bytes_moved: 0,
                critical_path_lower_bound: 0.0,
                device_busy: vec![0.0; ndev],
                device_tasks: vec![0; ndev],
            },
            bytes_at_start,
            done: 0,
            max_end: epoch_start,
        }
    }

    fn task(&self, id: TaskId) -> &TaskRecord {
        &self.tasks[id - self.base]
    }

    fn view(&self, id: TaskId) -> TaskView<'_> {
        let t = self.task(id);
        TaskView {
            id,
            cost_hint: t.cost_hint,
            accesses: &t.accesses,
            working_set_bytes: t.working_set_bytes(),
            ready_at: self.ready_at[id - self.base],
        }
    }

    fn drive(&mut self) -> Result<()> {
        if self.sim.policy.commits_on_ready() {
            let meta: Vec<(TaskId, u64, Vec<TaskId>)> = self
                .tasks
                .iter()
                .map(|t| (t.id, t.cost_hint, t.preds.clone()))
                .collect();
            self.sim.policy.observe_epoch(&meta);
        }
        let initially_ready: Vec<TaskId> = (0..self.tasks.len())
            .filter(|&i| self.remaining_preds[i] == 0)
            .map(|i| self.base + i)
            .collect();
        self.on_ready(initially_ready)?;
        self.dispatch()?;

        while let Some(Reverse((TimeKey(t_end), tid))) = self.events.pop() {
            debug_assert!(t_end >= self.sim.vnow);
            self.sim.vnow = t_end;
            self.handle_finish(tid)?;
        }

        if self.done < self.tasks.len() {
            // Should be unreachable: dispatch errors out when stuck.
            return Err(Error::Config(format!(
                "scheduler stalled with {} of {} tasks done",
                self.done,
                self.tasks.len()
            )));
        }
        Ok(())
    }

    fn handle_finish(&mut self, tid: TaskId) -> Result<()> {
        let tasks = self.tasks;
        let task = &tasks[tid - self.base];
        let dev = self.plan.device_of[tid - self.base];
        for (h, _) in &task.accesses {
            self.sim.memory.unpin(dev, h.id);
        }
        self.done += 1;
        let mut newly_ready = Vec::new();
        for &s in &task.succs {
            let slot = s - self.base;
            self.remaining_preds[slot] -= 1;
            if self.remaining_preds[slot] == 0 {
                self.ready_at[slot] = self.sim.vnow;
                newly_ready.push(s);
            }
        }
        newly_ready.sort_unstable();
        self.on_ready(newly_ready)?;
        self.dispatch()
    }

    /// Admits newly ready tasks: eager pools them, greedy commits each
    /// to a device queue right away and issues prefetches for it.
    fn on_ready(&mut self, ready: Vec<TaskId>) -> Result<()> {
        if !self.sim.policy.commits_on_ready() {
            self.pool.extend(ready);
            return Ok(());
        }
        for tid in ready {
            let decision = {
                let states = self.sim.device_states();
                let ctx = PickContext {
                    now: self.sim.vnow,
                    rr_cursor: self.sim.rr_cursor,
                };
                let view = self.view(tid);
                self.sim
                    .policy
                    .pick_device(&view, &states, &self.sim.memory, &ctx)
            };
            let decision = decision.ok_or_else(|| Error::Unschedulable {
                task: tid,
                kernel: self.task(tid).kernel.clone(),
                bytes: self.task(tid).working_set_bytes(),
            })?;
            self.sim.avail_at[decision.device] = decision.predicted_end;
            self.queues[decision.device].push_back(tid);
            if self.options.prefetch {
                let wanted = {
                    let view = self.view(tid);
                    self.sim
                        .policy
                        .prefetch_requests(&decision, &view, &self.sim.memory)
                };
                for h in wanted {
                    let outcome = self.sim.memory.prefetch(decision.device, h, self.sim.vnow);
                    if self.options.record_trace {
                        self.trace.prefetches.push(PrefetchRecord {
                            task: tid,
                            device: decision.device,
                            tile: h.id,
                            at: self.sim.vnow,
                            started: matches!(outcome, PrefetchOutcome::Started { .. }),
                            was_resident: matches!(outcome, PrefetchOutcome::AlreadyResident),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Starts every task that can start now. Out-of-memory failures are
    /// retried at the next event while other work is still in flight and
    /// become hard errors only when nothing else is running.
    fn dispatch(&mut self) -> Result<()> {
        if self.sim.policy.commits_on_ready() {
            self.dispatch_queued()
        } else {
            self.dispatch_eager()
        }
    }

    fn dispatch_queued(&mut self) -> Result<()> {
        for d in 0..self.queues.len() {
            while self.sim.free_at[d] <= self.sim.vnow {
                let Some(&tid) = self.queues[d].front() else {
                    break;
                };
                match self.try_start(tid, d) {
                    Ok(()) => {
                        self.queues[d].pop_front();
                    }
                    Err(oom) => {
                        if self.events.is_empty() {
                            // Nothing running anywhere; waiting cannot free
                            // memory, so try every other device right now.
                            self.queues[d].pop_front();
                            self.start_anywhere(tid, Some(d), oom)?;
                        }
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    fn dispatch_eager(&mut self) -> Result<()> {
        let mut last_oom: Option<Error> = None;
        loop {
            let mut placed = None;
            let snapshot: Vec<TaskId> = self.pool.iter().copied().collect();
            'scan: for (qi, &tid) in snapshot.iter().enumerate() {
                let states = self.sim.device_states();
                let n = states.len();
                let ws = self.task(tid).working_set_bytes();
                if !(0..n).any(|d| self.sim.memory.fits_device(d, ws)) {
                    return Err(Error::Unschedulable {
                        task: tid,
                        kernel: self.task(tid).kernel.clone(),
                        bytes: ws,
                    });
                }
                for offset in 0..n {
                    let d = (self.sim.rr_cursor + offset) % n;
                    if !states[d].idle || !self.sim.memory.fits_device(d, ws) {
                        continue;
                    }
                    match self.try_start(tid, d) {
                        Ok(()) => {
                            self.sim.rr_cursor = (d + 1) % n;
                            placed = Some(qi);
                            break 'scan;
                        }
                        Err(e) => last_oom = Some(e),
                    }
                }
            }
            match placed {
                Some(qi) => {
                    self.pool.remove(qi);
                }
                None => break,
            }
        }
        if !self.pool.is_empty() && self.events.is_empty() {
            // All devices are idle (nothing is in flight) and a full scan
            // failed: waiting cannot free memory, so this is final.
            return Err(last_oom.unwrap_or_else(|| {
                let &tid = self.pool.front().expect("pool checked non-empty");
                Error::Unschedulable {
                    task: tid,
                    kernel: self.task(tid).kernel.clone(),
                    bytes: self.task(tid).working_set_bytes(),
                }
            }));
        }
        Ok(())
    }

    fn start_anywhere(
        &mut self,
        tid: TaskId,
        tried: Option<usize>,
        first_err: Error,
    ) -> Result<()> {
        for d in 0..self.sim.topology.len() {
            if Some(d) == tried {
                continue;
            }
            if !self
                .sim
                .memory
                .fits_device(d, self.task(tid).working_set_bytes())
            {
                continue;
            }
            if self.try_start(tid, d).is_ok() {
                return Ok(());
            }
        }
        Err(first_err)
    }

    /// Acquires the task's tiles on the device and books its compute
    /// interval. Rolls back pins (but not residency churn) on failure.
    fn try_start(&mut self, tid: TaskId, dev: usize) -> Result<()> {
        let now = self.sim.vnow;
        let mut transfers_done = now;
        let mut bytes = 0u64;
        let task = &self.tasks[tid - self.base];

        if let Some(TaskBody::ReduxCommit(_)) = &*task.body.lock() {
            let out = self.sim.memory.commit_redux(dev, task.accesses[0].0, now);
            transfers_done = transfers_done.max(out.ready_at);
            bytes += out.bytes_moved;
        }

        let mut pinned = 0usize;
        let mut failure = None;
        for (h, mode) in &task.accesses {
            match self.sim.memory.acquire(dev, *h, *mode, now) {
                Ok(out) => {
                    self.sim.memory.pin(dev, h.id);
                    pinned += 1;
                    transfers_done = transfers_done.max(out.ready_at);
                    bytes += out.bytes_moved;
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failure {
            for (h, _) in task.accesses.iter().take(pinned) {
                self.sim.memory.unpin(dev, h.id);
            }
            return Err(e);
        }

        let speed = self.sim.topology.devices[dev].speed;
        let start = self.sim.free_at[dev].max(transfers_done);
        let end = start + task.cost_hint as f64 / speed;
        self.sim.free_at[dev] = end;
        self.sim.avail_at[dev] = self.sim.avail_at[dev].max(end);
        self.events.push(Reverse((TimeKey(end), tid)));

        let slot = tid - self.base;
        self.plan.device_of[slot] = dev;
        self.plan.device_queues[dev].push(tid);
        self.plan.device_busy[dev] += end - start;
        self.plan.device_tasks[dev] += 1;
        self.max_end = self.max_end.max(end);
        if self.options.record_trace {
            self.trace.tasks.push(TaskTraceRecord {
                task: tid,
                kernel: task.kernel.clone(),
                device: dev,
                ready_ns: to_ns(self.ready_at[slot]),
                place_ns: to_ns(now),
                start_ns: to_ns(start),
                end_ns: to_ns(end),
                bytes_moved: bytes,
            });
        }
        Ok(())
    }

    fn finish(mut self) -> EpochPlan {
        self.sim.vnow = self.max_end;
        // Every queue drained, so predicted and actual availability agree.
        for d in 0..self.sim.free_at.len() {
            self.sim.avail_at[d] = self.sim.free_at[d];
        }
        self.plan.makespan = self.max_end - self.epoch_start;
        self.plan.bytes_moved = self.sim.memory.total_bytes_moved - self.bytes_at_start;
        self.plan.critical_path_lower_bound = self.critical_path_cost() / self.sim.topology.max_speed();
        // The schedule respects dependencies and per-device serialization,
        // so it can never beat the critical path at full speed.
        assert!(
            self.plan.makespan >= self.plan.critical_path_lower_bound - 1e-9,
            "makespan {} below critical-path bound {}",
            self.plan.makespan,
            self.plan.critical_path_lower_bound
        );
        if self.options.record_trace {
            for ev in self.sim.memory.events.drain(..) {
                self.trace.residency.push(ev);
            }
        }
        self.plan
    }

    /// Longest chain of cost hints through the epoch's DAG.
    fn critical_path_cost(&self) -> f64 {
        let n = self.tasks.len();
        let mut cp = vec![0.0f64; n];
        let mut best = 0.0f64;
        for i in 0..n {
            let t = &self.tasks[i];
            let mut longest_pred = 0.0f64;
            for &p in &t.preds {
                if p >= self.base {
                    longest_pred = longest_pred.max(cp[p - self.base]);
                }
            }
            cp[i] = longest_pred + t.cost_hint as f64;
            best = best.max(cp[i]);
        }
        best
    }
}

fn to_ns(t: f64) -> u64 {
    (t * 1e9).round() as u64
}

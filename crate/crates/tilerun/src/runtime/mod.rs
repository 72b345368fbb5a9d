//! Sequential-task-flow runtime: tile registration, task submission with
//! access-mode dependency inference, and asynchronous execution on a
//! worker pool driven by a virtual-time device schedule.

mod exec;
mod graph;
pub mod trace;

use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::devices::Topology;
use crate::error::{Error, Result};
use crate::scheduler::sim::SimState;
use crate::scheduler::PolicyKind;
use trace::{EpochSummary, RunTrace};

pub(crate) use graph::TaskGraph;

/// Identifier of a registered tile, unique for the runtime lifetime.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct TileId(pub u64);

/// Identifier of a submitted task; ids are assigned in submission order.
pub type TaskId = usize;

/// Lightweight handle to one tile's data block. The handle itself is
/// plain metadata; the data lives in the runtime's main store.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TileHandle {
    pub id: TileId,
    /// Size of the data block in bytes (dtype is F32, so a multiple of 4).
    pub nbytes: u64,
    /// Main-store address token (byte offset in a flat address space).
    pub home: u64,
}

impl TileHandle {
    /// Number of f32 elements in the tile.
    pub fn elems(&self) -> usize {
        (self.nbytes / 4) as usize
    }
}

/// Declared intent of a task on one tile. The mode pair of two tasks
/// sharing a tile decides whether an ordering edge is inferred.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AccessMode {
    Read,
    Write,
    ReadWrite,
    /// Commutative accumulation: tasks reducing into the same tile are
    /// unordered among themselves and merged at a commit point.
    Reduce,
}

/// Initial contents of a freshly registered tile.
#[derive(Clone, Copy, Debug)]
pub enum Fill {
    Zeros,
    Const(f32),
    /// Seeded normal distribution; identical bytes for identical seeds.
    Normal { mean: f32, std: f32, seed: u64 },
}

/// Lifecycle of a task. Every task walks Submitted -> Ready -> Running
/// -> Done exactly once.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
#[repr(u8)]
pub enum TaskState {
    Submitted = 0,
    Ready = 1,
    Running = 2,
    Done = 3,
}

/// View of a task's tiles handed to the kernel body. Each access index
/// yields its slice exactly once: reads may alias, mutable views never do.
pub struct KernelCtx<'a> {
    views: Vec<Option<View<'a>>>,
}

pub(crate) enum View<'a> {
    R(&'a [f32]),
    W(&'a mut [f32]),
}

impl<'a> KernelCtx<'a> {
    pub(crate) fn new(views: Vec<Option<View<'a>>>) -> Self {
        KernelCtx { views }
    }

    /// Takes the read view of access `i`. Panics if `i` was not declared
    /// with `Read` or was already taken.
    pub fn read(&mut self, i: usize) -> &'a [f32] {
        match self.views[i].take() {
            Some(View::R(s)) => s,
            Some(View::W(_)) => panic!("access {i} is writable, use write()"),
            None => panic!("access {i} already taken"),
        }
    }

    /// Takes the mutable view of access `i` (Write/ReadWrite give the
    /// canonical tile, Reduce gives this task's private partial buffer).
    pub fn write(&mut self, i: usize) -> &'a mut [f32] {
        match self.views[i].take() {
            Some(View::W(s)) => s,
            Some(View::R(_)) => panic!("access {i} is read-only, use read()"),
            None => panic!("access {i} already taken"),
        }
    }
}

pub(crate) type KernelFn = Box<dyn FnOnce(&mut KernelCtx<'_>) -> Result<()> + Send>;

/// Key of one reduce contribution: submitting task and access index.
pub(crate) type PartialKey = (TaskId, usize);

pub(crate) enum TaskBody {
    User(KernelFn),
    /// Merge the listed reduce partials into the canonical tile, in
    /// ascending task id order.
    ReduxCommit(Vec<PartialKey>),
}

pub(crate) struct TaskRecord {
    pub id: TaskId,
    pub kernel: String,
    pub accesses: Vec<(TileHandle, AccessMode)>,
    pub cost_hint: u64,
    pub preds: Vec<TaskId>,
    pub succs: Vec<TaskId>,
    pub body: Mutex<Option<TaskBody>>,
    pub state: AtomicU8,
}

impl TaskRecord {
    pub fn state(&self) -> TaskState {
        match self.state.load(Ordering::Acquire) {
            0 => TaskState::Submitted,
            1 => TaskState::Ready,
            2 => TaskState::Running,
            _ => TaskState::Done,
        }
    }

    pub fn set_state(&self, s: TaskState) {
        self.state.store(s as u8, Ordering::Release);
    }

    /// Total bytes of the distinct tiles this task touches.
    pub fn working_set_bytes(&self) -> u64 {
        let mut seen: Vec<TileId> = Vec::with_capacity(self.accesses.len());
        let mut total = 0;
        for (h, _) in &self.accesses {
            if !seen.contains(&h.id) {
                seen.push(h.id);
                total += h.nbytes;
            }
        }
        total
    }
}

pub(crate) struct TileMeta {
    pub version: AtomicU64,
    pub data: RwLock<Vec<f32>>,
}

/// Owner of all tile data ("main store").
pub(crate) struct TileStore {
    tiles: Vec<Arc<TileMeta>>,
    next_home: u64,
}

impl TileStore {
    fn new() -> Self {
        TileStore {
            tiles: Vec::new(),
            next_home: 0,
        }
    }

    pub fn get(&self, id: TileId) -> Result<&Arc<TileMeta>> {
        self.tiles
            .get(id.0 as usize)
            .ok_or(Error::UnregisteredTile(id))
    }
}

/// Execution knobs for one runtime instance.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub policy: PolicyKind,
    /// When false, devices never evict: a full device is an error.
    pub offload: bool,
    /// When false, the greedy policy emits no prefetch directives.
    pub prefetch: bool,
    /// Record one trace entry per task (and residency events).
    pub record_trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            policy: PolicyKind::GreedyEct,
            offload: true,
            prefetch: true,
            record_trace: false,
        }
    }
}

/// The runtime. One value per training run; submission happens from a
/// single context, enforced by `&mut self` on all submission methods.
pub struct Runtime {
    store: TileStore,
    graph: TaskGraph,
    options: RunOptions,
    sim: SimState,
    trace: RunTrace,
    partials: Mutex<std::collections::HashMap<PartialKey, Vec<f32>>>,
    /// Tasks with id < executed are Done.
    executed: usize,
    failed: Option<String>,
    epoch: usize,
}

impl Runtime {
    pub fn new(topology: Topology, options: RunOptions) -> Result<Self> {
        topology.validate()?;
        let sim = SimState::new(topology, &options);
        Ok(Runtime {
            store: TileStore::new(),
            graph: TaskGraph::new(),
            options,
            sim,
            trace: RunTrace::default(),
            partials: Mutex::new(std::collections::HashMap::new()),
            executed: 0,
            failed: None,
            epoch: 0,
        })
    }

    /// Single-device convenience constructor used throughout the tests.
    pub fn single_cpu() -> Self {
        Runtime::new(Topology::cpu_only(1), RunOptions::default()).expect("valid topology")
    }

    pub fn options(&self) -> &RunOptions {
        &self.options
    }

    pub fn topology(&self) -> &Topology {
        self.sim.topology()
    }

    /// Registers a tile of `nbytes` bytes in the main store.
    pub fn register_tile(&mut self, nbytes: u64, init: Fill) -> Result<TileHandle> {
        if nbytes == 0 || nbytes % 4 != 0 {
            return Err(Error::BadTileSize(nbytes));
        }
        let elems = (nbytes / 4) as usize;
        let data = match init {
            Fill::Zeros => vec![0.0; elems],
            Fill::Const(c) => vec![c; elems],
            Fill::Normal { mean, std, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Normal::new(mean, std)
                    .map_err(|e| Error::Config(format!("bad normal fill: {e}")))?;
                (0..elems).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        let id = TileId(self.store.tiles.len() as u64);
        let handle = TileHandle {
            id,
            nbytes,
            home: self.store.next_home,
        };
        self.store.next_home += nbytes;
        self.store.tiles.push(Arc::new(TileMeta {
            version: AtomicU64::new(0),
            data: RwLock::new(data),
        }));
        self.graph.on_tile_registered();
        Ok(handle)
    }

    /// Submits one task. Dependency edges against earlier tasks are
    /// derived from the access modes; the body runs at `wait_all`.
    pub fn submit<F>(
        &mut self,
        kernel: impl Into<String>,
        cost_hint: u64,
        accesses: Vec<(TileHandle, AccessMode)>,
        body: F,
    ) -> Result<TaskId>
    where
        F: FnOnce(&mut KernelCtx<'_>) -> Result<()> + Send + 'static,
    {
        self.check_alive()?;
        for (h, _) in &accesses {
            self.store.get(h.id)?;
        }
        self.graph
            .submit(kernel.into(), cost_hint, accesses, TaskBody::User(Box::new(body)))
    }

    /// Merges all pending reduce contributions on `handle` into its
    /// canonical data, in ascending task id order. No-op when the handle
    /// has no pending reductions.
    pub fn reduction_commit(&mut self, handle: TileHandle) -> Result<()> {
        self.check_alive()?;
        self.store.get(handle.id)?;
        self.graph.flush_reduces(handle)?;
        Ok(())
    }

    /// Blocks until every submitted task is Done. Idempotent: a second
    /// call with no new submissions returns immediately.
    pub fn wait_all(&mut self) -> Result<()> {
        self.check_alive()?;
        if self.executed == self.graph.len() {
            return Ok(());
        }
        let base = self.executed;
        let tasks = self.graph.slice_from(base);
        let plan = match self.sim.plan_epoch(base, tasks, &self.options, &mut self.trace) {
            Ok(p) => p,
            Err(e) => {
                let msg = e.to_string();
                self.failed = Some(msg);
                return Err(e);
            }
        };
        let res = exec::execute_epoch(base, tasks, &plan, &self.store, &self.partials);
        // All tasks are accounted for even on failure, so the id range is
        // consumed either way; a failed run is poisoned for later calls.
        self.executed = self.graph.len();
        self.epoch += 1;
        self.trace.summaries.push(EpochSummary {
            epoch: self.epoch - 1,
            makespan: plan.makespan,
            bytes_moved: plan.bytes_moved,
            critical_path_lower_bound: plan.critical_path_lower_bound,
            device_busy: plan.device_busy.clone(),
            device_tasks: plan.device_tasks.clone(),
        });
        if let Err(e) = res {
            let msg = e.to_string();
            self.failed = Some(msg);
            return Err(e);
        }
        Ok(())
    }

    fn check_alive(&self) -> Result<()> {
        match &self.failed {
            Some(msg) => Err(Error::RunPoisoned(msg.clone())),
            None => Ok(()),
        }
    }

    /// Copies a tile's committed contents out of the main store.
    pub fn read_tile(&self, handle: TileHandle) -> Result<Vec<f32>> {
        let meta = self.store.get(handle.id)?;
        Ok(meta.data.read().clone())
    }

    /// Overwrites a tile's contents directly (checkpoint loading). Only
    /// legal while no tasks are pending.
    pub fn write_tile(&mut self, handle: TileHandle, data: &[f32]) -> Result<()> {
        self.check_alive()?;
        if self.executed != self.graph.len() {
            return Err(Error::Config(
                "write_tile requires an idle runtime (call wait_all first)".into(),
            ));
        }
        let meta = self.store.get(handle.id)?;
        if data.len() != handle.elems() {
            return Err(Error::ShapeMismatch(format!(
                "tile {:?} holds {} elements, got {}",
                handle.id,
                handle.elems(),
                data.len()
            )));
        }
        meta.data.write().copy_from_slice(data);
        meta.version.fetch_add(1, Ordering::AcqRel);
        // The modeled devices may hold stale copies of this tile.
        self.sim.invalidate_tile(handle.id);
        Ok(())
    }

    /// Monotone write counter of the tile.
    pub fn tile_version(&self, handle: TileHandle) -> Result<u64> {
        Ok(self.store.get(handle.id)?.version.load(Ordering::Acquire))
    }

    /// Frees the records of completed tasks. Long-running training loops
    /// call this between steps; task introspection (`task_state`,
    /// `task_preds`) then reports retired tasks as plain Done.
    pub fn retire_completed(&mut self) {
        if self.failed.is_none() {
            self.graph.retire(self.executed);
        }
    }

    pub fn task_state(&self, task: TaskId) -> Option<TaskState> {
        if task < self.graph.retired_before() {
            return Some(TaskState::Done);
        }
        self.graph.get(task).map(|t| t.state())
    }

    pub fn task_kernel(&self, task: TaskId) -> Option<&str> {
        self.graph.get(task).map(|t| t.kernel.as_str())
    }

    /// Dependency predecessors of a task (empty for retired tasks).
    pub fn task_preds(&self, task: TaskId) -> Vec<TaskId> {
        self.graph
            .get(task)
            .map(|t| t.preds.clone())
            .unwrap_or_default()
    }

    pub fn task_count(&self) -> usize {
        self.graph.len()
    }

    pub fn trace(&self) -> &RunTrace {
        &self.trace
    }

    pub fn last_summary(&self) -> Option<&EpochSummary> {
        self.trace.summaries.last()
    }

    /// Virtual time elapsed so far (seconds of the modeled clock).
    pub fn virtual_now(&self) -> f64 {
        self.sim.now()
    }
}

#[cfg(test)]
mod tests;

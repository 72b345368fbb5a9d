//! Task graph: append-only task list plus the per-tile trackers that
//! derive dependency edges from access modes at submission time.

use std::collections::BTreeSet;
use std::sync::atomic::AtomicU8;

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::runtime::{AccessMode, PartialKey, TaskBody, TaskId, TaskRecord, TileHandle};

/// Per-tile dependency state, updated as tasks are submitted.
#[derive(Default)]
struct TileTracker {
    /// Last task that wrote (Write/ReadWrite, including redux commits).
    last_writer: Option<TaskId>,
    /// Readers since the last writer.
    readers: Vec<TaskId>,
    /// Pending reduce contributions (task id, access index), in
    /// submission order.
    reduces: Vec<PartialKey>,
}

/// Append-only task list. Records of fully executed epochs are retired
/// to bound memory; dependency trackers keep only task ids, which stay
/// valid as plain ordering tokens.
pub(crate) struct TaskGraph {
    base: usize,
    live: Vec<TaskRecord>,
    trackers: Vec<TileTracker>,
}

impl TaskGraph {
    pub fn new() -> Self {
        TaskGraph {
            base: 0,
            live: Vec::new(),
            trackers: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.base + self.live.len()
    }

    pub fn on_tile_registered(&mut self) {
        self.trackers.push(TileTracker::default());
    }

    pub fn get(&self, id: TaskId) -> Option<&TaskRecord> {
        if id < self.base {
            return None;
        }
        self.live.get(id - self.base)
    }

    pub fn slice_from(&self, from: usize) -> &[TaskRecord] {
        assert!(from >= self.base, "cannot revisit retired tasks");
        &self.live[from - self.base..]
    }

    pub fn retired_before(&self) -> usize {
        self.base
    }

    /// Drops the records of fully executed tasks to bound memory over
    /// long training runs.
    pub fn retire(&mut self, upto: usize) {
        assert!(upto >= self.base && upto <= self.len());
        self.live.drain(..upto - self.base);
        self.base = upto;
    }

    pub fn submit(
        &mut self,
        kernel: String,
        cost_hint: u64,
        accesses: Vec<(TileHandle, AccessMode)>,
        body: TaskBody,
    ) -> Result<TaskId> {
        if accesses.is_empty() {
            return Err(Error::EmptyAccessList);
        }
        // A tile may appear twice only if every appearance is a Read.
        for (i, (h, m)) in accesses.iter().enumerate() {
            for (h2, m2) in &accesses[i + 1..] {
                if h.id == h2.id && (*m != AccessMode::Read || *m2 != AccessMode::Read) {
                    return Err(Error::ConflictingAccess { tile: h.id });
                }
            }
        }
        // A non-reduce access to a tile with pending reductions triggers
        // the merge first, so the new task observes committed data.
        for (h, m) in &accesses {
            if *m != AccessMode::Reduce {
                self.flush_reduces(*h)?;
            }
        }

        let id = self.len();
        let mut preds = BTreeSet::new();
        for (aidx, (h, mode)) in accesses.iter().enumerate() {
            let tr = &mut self.trackers[h.id.0 as usize];
            match mode {
                AccessMode::Read => {
                    preds.extend(tr.last_writer);
                    tr.readers.push(id);
                }
                AccessMode::Write | AccessMode::ReadWrite => {
                    preds.extend(tr.last_writer);
                    preds.extend(tr.readers.iter().copied());
                    tr.readers.clear();
                    tr.last_writer = Some(id);
                }
                AccessMode::Reduce => {
                    preds.extend(tr.last_writer);
                    preds.extend(tr.readers.iter().copied());
                    tr.reduces.push((id, aidx));
                }
            }
        }
        preds.remove(&id);
        self.push_task(id, kernel, cost_hint, accesses, preds, body);
        Ok(id)
    }

    /// Materializes the commit task for a tile's pending reductions.
    pub fn flush_reduces(&mut self, handle: TileHandle) -> Result<()> {
        let tr = &mut self.trackers[handle.id.0 as usize];
        if tr.reduces.is_empty() {
            return Ok(());
        }
        let id = self.base + self.live.len();
        let mut preds: BTreeSet<TaskId> = BTreeSet::new();
        preds.extend(tr.last_writer);
        preds.extend(tr.readers.iter().copied());
        preds.extend(tr.reduces.iter().map(|(t, _)| *t));
        let contributors = std::mem::take(&mut tr.reduces);
        tr.readers.clear();
        tr.last_writer = Some(id);
        let cost = handle.elems() as u64 * contributors.len() as u64;
        self.push_task(
            id,
            "redux_commit".to_string(),
            cost,
            vec![(handle, AccessMode::ReadWrite)],
            preds,
            TaskBody::ReduxCommit(contributors),
        );
        Ok(())
    }

    fn push_task(
        &mut self,
        id: TaskId,
        kernel: String,
        cost_hint: u64,
        accesses: Vec<(TileHandle, AccessMode)>,
        preds: BTreeSet<TaskId>,
        body: TaskBody,
    ) {
        let preds: Vec<TaskId> = preds.into_iter().collect();
        for &p in &preds {
            debug_assert!(p < id, "edges point from earlier to later tasks");
            if p >= self.base {
                let slot = p - self.base;
                self.live[slot].succs.push(id);
            }
        }
        self.live.push(TaskRecord {
            id,
            kernel,
            accesses,
            cost_hint,
            preds,
            succs: Vec::new(),
            body: Mutex::new(Some(body)),
            state: AtomicU8::new(0),
        });
    }
}

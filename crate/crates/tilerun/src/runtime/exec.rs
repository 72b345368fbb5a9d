//! Real execution of a planned epoch on a worker pool: one worker per
//! modeled device, per-device FIFO queues in virtual start order, and
//! completion-driven dependency release. Kernels compute on main-store
//! data; the access-mode DAG guarantees they never race.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::runtime::{
    AccessMode, KernelCtx, PartialKey, TaskBody, TaskId, TaskRecord, TaskState, TileStore, View,
};
use crate::scheduler::sim::EpochPlan;

pub(crate) fn execute_epoch(
    base: usize,
    tasks: &[TaskRecord],
    plan: &EpochPlan,
    store: &TileStore,
    partials: &Mutex<HashMap<PartialKey, Vec<f32>>>,
) -> Result<()> {
    let n = tasks.len();
    if n == 0 {
        return Ok(());
    }
    let ndev = plan.device_queues.len();

    // Dependency countdown within the epoch; earlier tasks are done.
    let remaining: Vec<AtomicUsize> = tasks
        .iter()
        .map(|t| AtomicUsize::new(t.preds.iter().filter(|&&p| p >= base).count()))
        .collect();

    let mut senders = Vec::with_capacity(ndev);
    let mut receivers = Vec::with_capacity(ndev);
    for _ in 0..ndev {
        let (tx, rx) = mpsc::channel::<TaskId>();
        senders.push(tx);
        receivers.push(rx);
    }
    for (i, t) in tasks.iter().enumerate() {
        if remaining[i].load(Ordering::Relaxed) == 0 {
            t.set_state(TaskState::Ready);
            let dev = plan.device_of[i];
            senders[dev].send(base + i).expect("receiver alive");
        }
    }

    let aborted = AtomicBool::new(false);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let expected: Vec<usize> = plan.device_queues.iter().map(|q| q.len()).collect();

    std::thread::scope(|scope| {
        for (dev, rx) in receivers.into_iter().enumerate() {
            let senders = senders.clone();
            let remaining = &remaining;
            let aborted = &aborted;
            let first_error = &first_error;
            let expected = expected[dev];
            scope.spawn(move || {
                for _ in 0..expected {
                    let tid = match rx.recv() {
                        Ok(t) => t,
                        Err(_) => break,
                    };
                    let task = &tasks[tid - base];
                    if !aborted.load(Ordering::Acquire) {
                        task.set_state(TaskState::Running);
                        if let Err(e) = run_task(task, store, partials) {
                            let mut slot = first_error.lock();
                            if slot.is_none() {
                                *slot = Some(e);
                            }
                            aborted.store(true, Ordering::Release);
                        } else {
                            task.set_state(TaskState::Done);
                        }
                    }
                    // Release successors even when aborted so every worker
                    // drains its expected task count and exits.
                    for &s in &task.succs {
                        if remaining[s - base].fetch_sub(1, Ordering::AcqRel) == 1 {
                            let st = &tasks[s - base];
                            if !aborted.load(Ordering::Acquire) {
                                st.set_state(TaskState::Ready);
                            }
                            let d = plan.device_of[s - base];
                            let _ = senders[d].send(s);
                        }
                    }
                }
            });
        }
        drop(senders);
    });

    let outcome = first_error.lock().take();
    match outcome {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Executes one task body against the main store. Version counters bump
/// on completed writes and reduction commits.
fn run_task(
    task: &TaskRecord,
    store: &TileStore,
    partials: &Mutex<HashMap<PartialKey, Vec<f32>>>,
) -> Result<()> {
    let body = task
        .body
        .lock()
        .take()
        .expect("task body executed exactly once");
    match body {
        TaskBody::ReduxCommit(contributors) => {
            let handle = task.accesses[0].0;
            let meta = store.get(handle.id)?;
            let mut canonical = meta.data.write();
            let mut map = partials.lock();
            for key in &contributors {
                let partial = map
                    .remove(key)
                    .expect("reduce partial present at commit time");
                for (c, p) in canonical.iter_mut().zip(partial.iter()) {
                    *c += p;
                }
            }
            drop(map);
            drop(canonical);
            meta.version.fetch_add(1, Ordering::AcqRel);
            Ok(())
        }
        TaskBody::User(f) => {
            // Guards: one read guard per distinct read tile, one write
            // guard per Write/ReadWrite access, one private buffer per
            // Reduce access. The DAG makes lock acquisition race-free.
            let mut read_guards = Vec::new();
            let mut write_guards = Vec::new();
            let mut reduce_bufs: Vec<(PartialKey, Vec<f32>)> = Vec::new();
            for (aidx, (h, mode)) in task.accesses.iter().enumerate() {
                match mode {
                    AccessMode::Read => {
                        if !read_guards.iter().any(|(id, _)| *id == h.id) {
                            read_guards.push((h.id, store.get(h.id)?.data.read()));
                        }
                    }
                    AccessMode::Write | AccessMode::ReadWrite => {
                        write_guards.push((h.id, store.get(h.id)?.data.write()));
                    }
                    AccessMode::Reduce => {
                        reduce_bufs.push(((task.id, aidx), vec![0.0; h.elems()]));
                    }
                }
            }
            let result = {
                let mut wit = write_guards.iter_mut();
                let mut rit = reduce_bufs.iter_mut();
                let mut views = Vec::with_capacity(task.accesses.len());
                for (h, mode) in &task.accesses {
                    views.push(Some(match mode {
                        AccessMode::Read => {
                            let (_, g) = read_guards
                                .iter()
                                .find(|(id, _)| *id == h.id)
                                .expect("read guard present");
                            View::R(&g[..])
                        }
                        AccessMode::Write | AccessMode::ReadWrite => {
                            let (_, g) = wit.next().expect("write guard present");
                            View::W(&mut g[..])
                        }
                        AccessMode::Reduce => {
                            let (_, b) = rit.next().expect("reduce buffer present");
                            View::W(&mut b[..])
                        }
                    }));
                }
                let mut ctx = KernelCtx::new(views);
                catch_unwind(AssertUnwindSafe(move || f(&mut ctx)))
            };
            drop(write_guards);
            drop(read_guards);
            match result {
                Ok(Ok(())) => {
                    for (h, mode) in &task.accesses {
                        if matches!(mode, AccessMode::Write | AccessMode::ReadWrite) {
                            store.get(h.id)?.version.fetch_add(1, Ordering::AcqRel);
                        }
                    }
                    if !reduce_bufs.is_empty() {
                        let mut map = partials.lock();
                        for (key, buf) in reduce_bufs {
                            map.insert(key, buf);
                        }
                    }
                    Ok(())
                }
                Ok(Err(e)) => Err(Error::KernelFailed {
                    task: task.id,
                    kernel: task.kernel.clone(),
                    message: e.to_string(),
                }),
                Err(_) => Err(Error::KernelPanicked {
                    task: task.id,
                    kernel: task.kernel.clone(),
                }),
            }
        }
    }
}

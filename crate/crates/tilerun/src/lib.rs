//! A tile-based task-parallel training runtime.
//!
//! Tensors are partitioned into tiles, and every operation on them is
//! submitted as a task with declared per-tile access modes. The runtime
//! infers a dependency DAG from those declarations (sequential-task-flow
//! style), schedules the DAG onto a set of modeled heterogeneous devices
//! with per-device memory limits, offloading and prefetch, and executes
//! the kernels for real on a worker pool. A dense single-threaded
//! reference implementation ([`oracle`]) backs the test suite.

pub mod devices;
pub mod error;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod runtime;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
pub use runtime::{AccessMode, Fill, KernelCtx, RunOptions, Runtime, TaskId, TileHandle};

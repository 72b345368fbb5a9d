use thiserror::Error;

use crate::runtime::{TaskId, TileId};

/// Crate-wide error type. Kernel bodies return this as well, so task
/// failures surface through `wait_all` with full context.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tile {0:?} is not registered with this runtime")]
    UnregisteredTile(TileId),

    #[error("tile size must be a positive multiple of 4 bytes, got {0}")]
    BadTileSize(u64),

    #[error("task access list is empty")]
    EmptyAccessList,

    #[error("task declares tile {tile:?} twice with non-read access")]
    ConflictingAccess { tile: TileId },

    #[error("kernel `{kernel}` (task {task}) failed: {message}")]
    KernelFailed {
        task: TaskId,
        kernel: String,
        message: String,
    },

    #[error("kernel `{kernel}` (task {task}) panicked")]
    KernelPanicked { task: TaskId, kernel: String },

    #[error(
        "out of memory on device {device}: need {needed} bytes, capacity {capacity}, \
         in use {used} ({pinned} pinned); offload {offload}"
    )]
    OutOfDeviceMemory {
        device: usize,
        needed: u64,
        capacity: u64,
        used: u64,
        pinned: u64,
        offload: &'static str,
    },

    #[error("task {task} ({kernel}) cannot run on any device: working set of {bytes} bytes")]
    Unschedulable {
        task: TaskId,
        kernel: String,
        bytes: u64,
    },

    #[error("run already failed: {0}")]
    RunPoisoned(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

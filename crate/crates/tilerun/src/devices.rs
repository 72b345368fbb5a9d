//! Modeled heterogeneous node: workers with speed factors, per-device
//! memory capacities and link bandwidths, plus the residency manager
//! that tracks tile copies, offloads (evicts) under pressure and
//! prefetches ahead of scheduled tasks.
//!
//! Time here is virtual: transfers charge `nbytes / bandwidth` seconds on
//! the owning device's link to the main store. Kernel execution operates
//! on main-store data directly, so residency is pure accounting — which
//! is what makes out-of-memory behaviour reproducible at desk scale.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::{AccessMode, TileHandle, TileId};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum DeviceKind {
    /// Reads the main store directly; usually unbounded memory.
    CpuCore,
    /// Capacity-limited accelerator model behind a finite link.
    GpuLike,
}

/// One modeled worker.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeviceModel {
    pub id: usize,
    pub kind: DeviceKind,
    /// Abstract flops per virtual second; > 0.
    pub speed: f64,
    /// None = unbounded.
    pub mem_capacity: Option<u64>,
    /// Bytes per virtual second to/from the main store. None = the
    /// device addresses the main store directly (no copies, no charge).
    pub bandwidth_to_main: Option<f64>,
}

impl DeviceModel {
    pub fn gpu_like(id: usize, speed: f64, mem_capacity: u64, bandwidth: f64) -> Self {
        DeviceModel {
            id,
            kind: DeviceKind::GpuLike,
            speed,
            mem_capacity: Some(mem_capacity),
            bandwidth_to_main: Some(bandwidth),
        }
    }

    pub fn cpu_core(id: usize, speed: f64) -> Self {
        DeviceModel {
            id,
            kind: DeviceKind::CpuCore,
            speed,
            mem_capacity: None,
            bandwidth_to_main: None,
        }
    }

    fn direct_main(&self) -> bool {
        self.bandwidth_to_main.is_none()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Topology {
    pub devices: Vec<DeviceModel>,
}

impl Topology {
    pub fn new(devices: Vec<DeviceModel>) -> Self {
        Topology { devices }
    }

    /// Default desk-scale node: 4 GPU-like devices (speed 10) plus 4 CPU
    /// cores (speed 1, unbounded, direct main-store access).
    pub fn default_desk(gpu_capacity: u64, gpu_bandwidth: f64) -> Self {
        let mut devices = Vec::new();
        for i in 0..4 {
            devices.push(DeviceModel::gpu_like(i, 10.0, gpu_capacity, gpu_bandwidth));
        }
        for i in 4..8 {
            devices.push(DeviceModel::cpu_core(i, 1.0));
        }
        Topology { devices }
    }

    pub fn gpu_only(count: usize, speed: f64, capacity: u64, bandwidth: f64) -> Self {
        Topology {
            devices: (0..count)
                .map(|i| DeviceModel::gpu_like(i, speed, capacity, bandwidth))
                .collect(),
        }
    }

    pub fn cpu_only(count: usize) -> Self {
        Topology {
            devices: (0..count).map(|i| DeviceModel::cpu_core(i, 1.0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn max_speed(&self) -> f64 {
        self.devices.iter().map(|d| d.speed).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::Config("topology has no devices".into()));
        }
        for (i, d) in self.devices.iter().enumerate() {
            if d.id != i {
                return Err(Error::Config(format!(
                    "device ids must be dense and ordered, got {} at slot {i}",
                    d.id
                )));
            }
            if !(d.speed > 0.0) {
                return Err(Error::Config(format!("device {i}: speed must be > 0")));
            }
            if let Some(c) = d.mem_capacity {
                if c == 0 {
                    return Err(Error::Config(format!("device {i}: zero capacity")));
                }
            }
            if let Some(b) = d.bandwidth_to_main {
                if !(b > 0.0) {
                    return Err(Error::Config(format!("device {i}: bandwidth must be > 0")));
                }
            }
            if d.bandwidth_to_main.is_none() && d.mem_capacity.is_some() {
                return Err(Error::Config(format!(
                    "device {i}: direct main-store access implies unbounded capacity"
                )));
            }
            if d.kind == DeviceKind::GpuLike && d.mem_capacity.is_none() {
                return Err(Error::Config(format!(
                    "device {i}: GPU-like devices need a finite capacity"
                )));
            }
        }
        Ok(())
    }
}

/// State of one tile copy on one device.
#[derive(Clone, Copy, PartialEq, Debug)]
enum CopyState {
    Valid,
    Dirty,
    /// Transfer issued (prefetch); data usable from `arrival` on.
    InFlight { arrival: f64 },
}

#[derive(Clone, Debug)]
struct CopyEntry {
    handle: TileHandle,
    state: CopyState,
    last_use: u64,
    pins: u32,
}

struct DevMem {
    model: DeviceModel,
    entries: BTreeMap<TileId, CopyEntry>,
    /// Reduction partial buffers; pinned until their commit.
    redux: BTreeMap<TileId, TileHandle>,
    bytes_used: u64,
    link_free_at: f64,
    bytes_in: u64,
    bytes_out: u64,
}

impl DevMem {
    fn pinned_bytes(&self) -> u64 {
        let pinned: u64 = self
            .entries
            .values()
            .filter(|e| e.pins > 0)
            .map(|e| e.handle.nbytes)
            .sum();
        let redux: u64 = self.redux.values().map(|h| h.nbytes).sum();
        pinned + redux
    }
}

/// Result of an `acquire`: when the data is usable on the device, and
/// how many bytes moved on its behalf (fetch plus any writeback).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcquireOutcome {
    pub ready_at: f64,
    pub bytes_moved: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PrefetchOutcome {
    Started { arrival: f64 },
    AlreadyResident,
    InFlight,
    /// Best effort: no room, dirty elsewhere, or a direct-main device.
    Skipped,
}

/// Residency event, recorded for the capacity-invariant checks.
#[derive(Clone, Copy, Debug)]
pub struct ResidencyEvent {
    pub at: f64,
    pub device: usize,
    pub bytes_used: u64,
}

/// Tracks tile copies across all modeled devices.
pub struct MemoryManager {
    devs: Vec<DevMem>,
    dirty_owner: BTreeMap<TileId, usize>,
    clock: u64,
    offload: bool,
    record_events: bool,
    pub events: Vec<ResidencyEvent>,
    pub total_bytes_moved: u64,
}

impl MemoryManager {
    pub fn new(topology: &Topology, offload: bool, record_events: bool) -> Self {
        MemoryManager {
            devs: topology
                .devices
                .iter()
                .map(|m| DevMem {
                    model: m.clone(),
                    entries: BTreeMap::new(),
                    redux: BTreeMap::new(),
                    bytes_used: 0,
                    link_free_at: 0.0,
                    bytes_in: 0,
                    bytes_out: 0,
                })
                .collect(),
            dirty_owner: BTreeMap::new(),
            clock: 0,
            offload,
            record_events,
            events: Vec::new(),
            total_bytes_moved: 0,
        }
    }

    pub fn bytes_used(&self, device: usize) -> u64 {
        self.devs[device].bytes_used
    }

    pub fn device_traffic(&self, device: usize) -> (u64, u64) {
        (self.devs[device].bytes_in, self.devs[device].bytes_out)
    }

    /// True when the device could ever host a task with this working set.
    pub fn fits_device(&self, device: usize, working_set: u64) -> bool {
        match self.devs[device].model.mem_capacity {
            None => true,
            Some(cap) => working_set <= cap,
        }
    }

    /// Bytes that would have to move before `tile` is usable on `device`
    /// (the transfer term of the completion-time estimate).
    pub fn missing_bytes(&self, device: usize, tile: TileHandle) -> u64 {
        let dev = &self.devs[device];
        if dev.model.direct_main() || dev.entries.contains_key(&tile.id) {
            0
        } else {
            tile.nbytes
        }
    }

    pub fn is_resident(&self, device: usize, tile: TileId) -> bool {
        self.devs[device].entries.contains_key(&tile)
    }

    fn note_usage(&mut self, device: usize, at: f64) {
        let dev = &self.devs[device];
        if let Some(cap) = dev.model.mem_capacity {
            assert!(
                dev.bytes_used <= cap,
                "capacity invariant violated on device {device}: {} > {cap}",
                dev.bytes_used
            );
        }
        if self.record_events {
            self.events.push(ResidencyEvent {
                at,
                device,
                bytes_used: dev.bytes_used,
            });
        }
    }

    /// Charges a transfer of `nbytes` on the device's main-store link.
    fn charge_link(&mut self, device: usize, nbytes: u64, now: f64, inbound: bool) -> f64 {
        let dev = &mut self.devs[device];
        let bw = match dev.model.bandwidth_to_main {
            Some(bw) => bw,
            None => return now,
        };
        let start = dev.link_free_at.max(now);
        let end = start + nbytes as f64 / bw;
        dev.link_free_at = end;
        if inbound {
            dev.bytes_in += nbytes;
        } else {
            dev.bytes_out += nbytes;
        }
        self.total_bytes_moved += nbytes;
        end
    }

    /// Pushes the dirty copy back to the main store; the copy stays
    /// resident as Valid. Returns when the writeback completes.
    fn writeback(&mut self, owner: usize, tile: TileId, now: f64) -> f64 {
        let nbytes = self.devs[owner].entries[&tile].handle.nbytes;
        let end = self.charge_link(owner, nbytes, now, false);
        self.devs[owner]
            .entries
            .get_mut(&tile)
            .expect("dirty entry present")
            .state = CopyState::Valid;
        self.dirty_owner.remove(&tile);
        end
    }

    fn drop_copy(&mut self, device: usize, tile: TileId, at: f64) {
        if let Some(e) = self.devs[device].entries.remove(&tile) {
            self.devs[device].bytes_used -= e.handle.nbytes;
            if self.dirty_owner.get(&tile) == Some(&device) {
                self.dirty_owner.remove(&tile);
            }
            self.note_usage(device, at);
        }
    }

    /// Drops every device copy of a tile (host rewrote the main store).
    pub fn invalidate_everywhere(&mut self, tile: TileId) {
        for d in 0..self.devs.len() {
            self.drop_copy(d, tile, 0.0);
        }
    }

    fn invalidate_other_copies(&mut self, keep: usize, tile: TileId, at: f64) {
        for d in 0..self.devs.len() {
            if d != keep {
                self.drop_copy(d, tile, at);
            }
        }
    }

    /// Frees unpinned tiles in least-recently-used order until
    /// `bytes_needed` more bytes fit. Dirty victims are written back
    /// first. Returns the evicted tiles.
    pub fn evict(&mut self, device: usize, bytes_needed: u64, now: f64) -> Result<Vec<TileHandle>> {
        let cap = match self.devs[device].model.mem_capacity {
            Some(cap) => cap,
            None => return Ok(Vec::new()),
        };
        if !self.offload {
            return Err(self.oom(device, bytes_needed, "disabled (--no-offload)"));
        }
        let mut victims: Vec<(u64, TileId)> = self.devs[device]
            .entries
            .values()
            .filter(|e| e.pins == 0)
            .map(|e| (e.last_use, e.handle.id))
            .collect();
        victims.sort_unstable();
        let mut evicted = Vec::new();
        let mut vit = victims.into_iter();
        while self.devs[device].bytes_used.saturating_add(bytes_needed) > cap {
            let Some((_, tile)) = vit.next() else {
                return Err(self.oom(device, bytes_needed, "enabled, all residents pinned"));
            };
            let entry = self.devs[device].entries[&tile].clone();
            if entry.state == CopyState::Dirty {
                self.writeback(device, tile, now);
            }
            self.drop_copy(device, tile, now);
            evicted.push(entry.handle);
        }
        Ok(evicted)
    }

    fn oom(&self, device: usize, needed: u64, offload: &'static str) -> Error {
        let dev = &self.devs[device];
        Error::OutOfDeviceMemory {
            device,
            needed,
            capacity: dev.model.mem_capacity.unwrap_or(u64::MAX),
            used: dev.bytes_used,
            pinned: dev.pinned_bytes(),
            offload,
        }
    }

    fn ensure_space(&mut self, device: usize, nbytes: u64, now: f64) -> Result<()> {
        if let Some(cap) = self.devs[device].model.mem_capacity {
            if nbytes > cap {
                return Err(self.oom(device, nbytes, "irrelevant: tile exceeds capacity"));
            }
            if self.devs[device].bytes_used + nbytes > cap {
                self.evict(device, nbytes, now)?;
            }
        }
        Ok(())
    }

    /// Makes a usable copy of the tile available on the device for the
    /// given access mode. Reduce allocates a private partial buffer
    /// instead of copying data.
    pub fn acquire(
        &mut self,
        device: usize,
        handle: TileHandle,
        mode: AccessMode,
        now: f64,
    ) -> Result<AcquireOutcome> {
        self.clock += 1;
        let use_stamp = self.clock;
        let direct = self.devs[device].model.direct_main();

        if mode == AccessMode::Reduce {
            if direct || self.devs[device].redux.contains_key(&handle.id) {
                return Ok(AcquireOutcome {
                    ready_at: now,
                    bytes_moved: 0,
                });
            }
            self.ensure_space(device, handle.nbytes, now)?;
            self.devs[device].redux.insert(handle.id, handle);
            self.devs[device].bytes_used += handle.nbytes;
            self.note_usage(device, now);
            return Ok(AcquireOutcome {
                ready_at: now,
                bytes_moved: 0,
            });
        }

        let mut ready_at = now;
        let mut bytes_moved = 0u64;

        if direct {
            // The device computes on main-store data; only coherence with
            // a dirty copy elsewhere matters.
            if let Some(&owner) = self.dirty_owner.get(&handle.id) {
                if mode == AccessMode::Write {
                    self.drop_copy(owner, handle.id, now);
                } else {
                    ready_at = ready_at.max(self.writeback(owner, handle.id, now));
                    bytes_moved += handle.nbytes;
                }
            }
            if mode != AccessMode::Read {
                self.invalidate_other_copies(usize::MAX, handle.id, now);
            }
            return Ok(AcquireOutcome {
                ready_at,
                bytes_moved,
            });
        }

        let present = self.devs[device].entries.contains_key(&handle.id);
        if present {
            let entry = self.devs[device].entries.get_mut(&handle.id).unwrap();
            entry.last_use = use_stamp;
            if let CopyState::InFlight { arrival } = entry.state {
                ready_at = ready_at.max(arrival);
                entry.state = CopyState::Valid;
            }
        } else {
            if let Some(&owner) = self.dirty_owner.get(&handle.id) {
                if owner != device {
                    if mode == AccessMode::Write {
                        // Full overwrite: the stale data is never read.
                        self.drop_copy(owner, handle.id, now);
                    } else {
                        ready_at = ready_at.max(self.writeback(owner, handle.id, now));
                        bytes_moved += handle.nbytes;
                    }
                }
            }
            self.ensure_space(device, handle.nbytes, now)?;
            if mode != AccessMode::Write {
                let end = self.charge_link(device, handle.nbytes, ready_at, true);
                ready_at = ready_at.max(end);
                bytes_moved += handle.nbytes;
            }
            self.devs[device].entries.insert(
                handle.id,
                CopyEntry {
                    handle,
                    state: CopyState::Valid,
                    last_use: use_stamp,
                    pins: 0,
                },
            );
            self.devs[device].bytes_used += handle.nbytes;
            self.note_usage(device, now);
        }

        if mode != AccessMode::Read {
            self.invalidate_other_copies(device, handle.id, now);
            self.devs[device]
                .entries
                .get_mut(&handle.id)
                .expect("entry just ensured")
                .state = CopyState::Dirty;
            self.dirty_owner.insert(handle.id, device);
        }
        Ok(AcquireOutcome {
            ready_at,
            bytes_moved,
        })
    }

    /// Best-effort speculative fetch; never fails, never evicts pinned
    /// data, and is dropped entirely when the device is full.
    pub fn prefetch(&mut self, device: usize, handle: TileHandle, now: f64) -> PrefetchOutcome {
        if self.devs[device].model.direct_main() {
            return PrefetchOutcome::Skipped;
        }
        if let Some(entry) = self.devs[device].entries.get(&handle.id) {
            return match entry.state {
                CopyState::InFlight { .. } => PrefetchOutcome::InFlight,
                _ => PrefetchOutcome::AlreadyResident,
            };
        }
        if self.dirty_owner.contains_key(&handle.id) {
            return PrefetchOutcome::Skipped;
        }
        if self.ensure_space(device, handle.nbytes, now).is_err() {
            return PrefetchOutcome::Skipped;
        }
        self.clock += 1;
        let arrival = self.charge_link(device, handle.nbytes, now, true);
        self.devs[device].entries.insert(
            handle.id,
            CopyEntry {
                handle,
                state: CopyState::InFlight { arrival },
                last_use: self.clock,
                pins: 0,
            },
        );
        self.devs[device].bytes_used += handle.nbytes;
        self.note_usage(device, now);
        PrefetchOutcome::Started { arrival }
    }

    /// Pins a resident copy so eviction skips it (no-op on direct-main
    /// devices and reduce buffers, which are pinned by construction).
    pub fn pin(&mut self, device: usize, tile: TileId) {
        if let Some(e) = self.devs[device].entries.get_mut(&tile) {
            e.pins += 1;
        }
    }

    pub fn unpin(&mut self, device: usize, tile: TileId) {
        if let Some(e) = self.devs[device].entries.get_mut(&tile) {
            e.pins = e.pins.saturating_sub(1);
        }
    }

    /// Accounts the transfers a reduction commit on `device` implies:
    /// every other device holding a partial buffer ships `nbytes` back.
    /// All partial buffers are released.
    pub fn commit_redux(&mut self, device: usize, handle: TileHandle, now: f64) -> AcquireOutcome {
        let mut ready_at = now;
        let mut bytes_moved = 0u64;
        for d in 0..self.devs.len() {
            if self.devs[d].redux.remove(&handle.id).is_some() {
                self.devs[d].bytes_used -= handle.nbytes;
                if d != device {
                    let end = self.charge_link(d, handle.nbytes, now, false);
                    ready_at = ready_at.max(end);
                    bytes_moved += handle.nbytes;
                }
                self.note_usage(d, now);
            }
        }
        AcquireOutcome {
            ready_at,
            bytes_moved,
        }
    }

    /// Devices currently holding a reduce partial buffer for the tile.
    pub fn redux_holders(&self, tile: TileId) -> Vec<usize> {
        (0..self.devs.len())
            .filter(|&d| self.devs[d].redux.contains_key(&tile))
            .collect()
    }
}

//! Shared helpers for the integration suites: comparison utilities, the
//! fuzz workload language with its sequential reference interpreter,
//! and the random layered DAG generator used by the scheduling checks.

pub mod cases;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilerun::devices::Topology;
use tilerun::scheduler::PolicyKind;
use tilerun::{AccessMode, Fill, RunOptions, Runtime, TileHandle};

#[allow(dead_code)]
pub fn cpu_rt(workers: usize) -> Runtime {
    Runtime::new(Topology::cpu_only(workers), RunOptions::default()).unwrap()
}

#[allow(dead_code)]
pub fn desk_rt(policy: PolicyKind) -> Runtime {
    Runtime::new(
        Topology::default_desk(256 << 20, 8e9),
        RunOptions {
            policy,
            ..RunOptions::default()
        },
    )
    .unwrap()
}

/// Relative comparison with a tensor-scale floor: `|a - b| <= tol *
/// max(scale, 1)` where scale is the largest reference magnitude. This
/// is the usual way to compare a tiled f32 result against a dense
/// reference without near-zero entries blowing up the ratio.
#[allow(dead_code)]
pub fn assert_close_f64(actual: &[f32], expected: &[f64], tol: f64, what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length mismatch");
    let scale = expected.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        let diff = (*a as f64 - e).abs();
        assert!(
            diff <= tol * scale,
            "{what}[{i}]: {a} vs {e} (diff {diff:.3e}, tol {tol:.1e}, scale {scale:.3e})"
        );
    }
}

#[allow(dead_code)]
pub fn max_rel_err(actual: &[f32], expected: &[f64]) -> f64 {
    let scale = expected.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    actual
        .iter()
        .zip(expected)
        .map(|(a, e)| (*a as f64 - e).abs() / scale)
        .fold(0.0, f64::max)
}

#[allow(dead_code)]
pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[allow(dead_code)]
pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

// ---------------------------------------------------------------------------
// Fuzz workload language + sequential reference interpreter
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum FuzzOp {
    /// tile <- value (Write).
    Fill { tile: usize, value: f32 },
    /// dst <- a*dst + b*src (ReadWrite, Read).
    Saxpy { dst: usize, src: usize, a: f32, b: f32 },
    /// partial += scale * src (Reduce, Read).
    Accum { dst: usize, src: usize, scale: f32 },
    /// Merge pending reductions on tile.
    Commit { tile: usize },
}

#[derive(Clone, Debug)]
pub struct FuzzProgram {
    pub n_tiles: usize,
    pub elems: usize,
    pub init: Vec<f32>,
    pub ops: Vec<FuzzOp>,
}

#[allow(dead_code)]
pub fn random_program(seed: u64) -> FuzzProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tiles = rng.gen_range(2..=6);
    let elems = rng.gen_range(1..=8);
    let init: Vec<f32> = (0..n_tiles).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    let n_ops = rng.gen_range(3..=24);
    let mut ops = Vec::with_capacity(n_ops);
    for _ in 0..n_ops {
        let t = rng.gen_range(0..n_tiles);
        let u = rng.gen_range(0..n_tiles);
        match rng.gen_range(0..5) {
            0 => ops.push(FuzzOp::Fill {
                tile: t,
                value: rng.gen_range(-2.0..2.0),
            }),
            1 | 2 => {
                if t != u {
                    ops.push(FuzzOp::Saxpy {
                        dst: t,
                        src: u,
                        a: rng.gen_range(-1.5..1.5),
                        b: rng.gen_range(-1.5..1.5),
                    });
                }
            }
            3 => {
                if t != u {
                    ops.push(FuzzOp::Accum {
                        dst: t,
                        src: u,
                        scale: rng.gen_range(-1.5..1.5),
                    });
                }
            }
            _ => ops.push(FuzzOp::Commit { tile: t }),
        }
    }
    FuzzProgram {
        n_tiles,
        elems,
        init,
        ops,
    }
}

/// Sequential reference: executes ops in submission order on plain
/// vectors. Reduce contributions become private partials merged in
/// ascending submission order at the commit point (or when the tile is
/// next touched in a non-reduce mode), mirroring the runtime contract.
#[allow(dead_code)]
pub fn run_sequential(p: &FuzzProgram) -> Vec<Vec<f32>> {
    let mut tiles: Vec<Vec<f32>> = p.init.iter().map(|&v| vec![v; p.elems]).collect();
    let mut pending: BTreeMap<usize, Vec<Vec<f32>>> = BTreeMap::new();
    fn flush(tiles: &mut [Vec<f32>], pending: &mut BTreeMap<usize, Vec<Vec<f32>>>, t: usize) {
        if let Some(parts) = pending.remove(&t) {
            for part in parts {
                for (c, x) in tiles[t].iter_mut().zip(part) {
                    *c += x;
                }
            }
        }
    }
    for op in &p.ops {
        match op {
            FuzzOp::Fill { tile, value } => {
                flush(&mut tiles, &mut pending, *tile);
                tiles[*tile].fill(*value);
            }
            FuzzOp::Saxpy { dst, src, a, b } => {
                flush(&mut tiles, &mut pending, *dst);
                flush(&mut tiles, &mut pending, *src);
                let srcv = tiles[*src].clone();
                for (d, s) in tiles[*dst].iter_mut().zip(srcv) {
                    *d = a * *d + b * s;
                }
            }
            FuzzOp::Accum { dst, src, scale } => {
                flush(&mut tiles, &mut pending, *src);
                let part: Vec<f32> = tiles[*src].iter().map(|&v| scale * v).collect();
                pending.entry(*dst).or_default().push(part);
            }
            FuzzOp::Commit { tile } => {
                flush(&mut tiles, &mut pending, *tile);
            }
        }
    }
    for t in 0..p.n_tiles {
        flush(&mut tiles, &mut pending, t);
    }
    tiles
}

/// Parallel execution of the same program through the runtime.
#[allow(dead_code)]
pub fn run_parallel(p: &FuzzProgram, rt: &mut Runtime) -> Vec<Vec<f32>> {
    let handles: Vec<TileHandle> = p
        .init
        .iter()
        .map(|&v| rt.register_tile(4 * p.elems as u64, Fill::Const(v)).unwrap())
        .collect();
    for op in &p.ops {
        match op.clone() {
            FuzzOp::Fill { tile, value } => {
                rt.submit(
                    "fz_fill",
                    p.elems as u64,
                    vec![(handles[tile], AccessMode::Write)],
                    move |ctx| {
                        ctx.write(0).fill(value);
                        Ok(())
                    },
                )
                .unwrap();
            }
            FuzzOp::Saxpy { dst, src, a, b } => {
                rt.submit(
                    "fz_saxpy",
                    3 * p.elems as u64,
                    vec![
                        (handles[dst], AccessMode::ReadWrite),
                        (handles[src], AccessMode::Read),
                    ],
                    move |ctx| {
                        let s = ctx.read(1).to_vec();
                        let d = ctx.write(0);
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv = a * *dv + b * sv;
                        }
                        Ok(())
                    },
                )
                .unwrap();
            }
            FuzzOp::Accum { dst, src, scale } => {
                rt.submit(
                    "fz_accum",
                    2 * p.elems as u64,
                    vec![
                        (handles[dst], AccessMode::Reduce),
                        (handles[src], AccessMode::Read),
                    ],
                    move |ctx| {
                        let s = ctx.read(1).to_vec();
                        let d = ctx.write(0);
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += scale * sv;
                        }
                        Ok(())
                    },
                )
                .unwrap();
            }
            FuzzOp::Commit { tile } => {
                rt.reduction_commit(handles[tile]).unwrap();
            }
        }
    }
    for &h in &handles {
        rt.reduction_commit(h).unwrap();
    }
    rt.wait_all().unwrap();
    handles
        .iter()
        .map(|&h| rt.read_tile(h).unwrap())
        .collect()
}

#[allow(dead_code)]
pub fn fuzz_topologies(seed: u64) -> Runtime {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let topo = match rng.gen_range(0..3) {
        0 => Topology::cpu_only(rng.gen_range(1..=4)),
        1 => Topology::gpu_only(rng.gen_range(1..=3), 10.0, 1 << 20, 1e9),
        _ => Topology::default_desk(1 << 20, 1e9),
    };
    let policy = if rng.gen_bool(0.5) {
        PolicyKind::EagerFifo
    } else {
        PolicyKind::GreedyEct
    };
    Runtime::new(
        topo,
        RunOptions {
            policy,
            ..RunOptions::default()
        },
    )
    .unwrap()
}

/// Serializability over a block of seeds: the parallel runtime must
/// reproduce the sequential interpreter bitwise.
#[allow(dead_code)]
pub fn serializability_block(seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let p = random_program(seed);
        let want = run_sequential(&p);
        let mut rt = fuzz_topologies(seed);
        let got = run_parallel(&p, &mut rt);
        assert_eq!(got, want, "serializability violated for seed {seed}");
    }
}

// ---------------------------------------------------------------------------
// Random layered DAGs for scheduling-quality checks
// ---------------------------------------------------------------------------

/// A random layered DAG of compute tasks over shared tiles on the
/// default desk topology. Returns the epoch's virtual makespan; also
/// asserts the critical-path lower bound.
#[allow(dead_code)]
pub fn layered_dag_makespan(seed: u64, policy: PolicyKind) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = Topology::default_desk(32 << 20, 2e5);
    let mut rt = Runtime::new(
        topo,
        RunOptions {
            policy,
            record_trace: true,
            ..RunOptions::default()
        },
    )
    .unwrap();

    let n_layers = rng.gen_range(3..=6);
    let width = rng.gen_range(3..=8);
    let tile_bytes = 4 * 4096u64;
    let mut prev: Vec<TileHandle> = (0..width)
        .map(|_| rt.register_tile(tile_bytes, Fill::Const(1.0)).unwrap())
        .collect();
    for _ in 0..n_layers {
        let mut next = Vec::with_capacity(width);
        for _ in 0..width {
            let out = rt.register_tile(tile_bytes, Fill::Zeros).unwrap();
            let fan_in = rng.gen_range(1..=3.min(prev.len()));
            let mut accesses = vec![(out, AccessMode::Write)];
            let mut srcs = Vec::new();
            for _ in 0..fan_in {
                let s = prev[rng.gen_range(0..prev.len())];
                if !srcs.contains(&s) {
                    srcs.push(s);
                    accesses.push((s, AccessMode::Read));
                }
            }
            let n_src = srcs.len();
            let cost = if rng.gen_bool(0.3) {
                rng.gen_range(2_000_000..10_000_000)
            } else {
                rng.gen_range(50_000..500_000)
            };
            rt.submit("layer_task", cost, accesses, move |ctx| {
                let mut acc = vec![0.0f32; 4096];
                for i in 0..n_src {
                    for (a, v) in acc.iter_mut().zip(ctx.read(1 + i)) {
                        *a += v;
                    }
                }
                ctx.write(0).copy_from_slice(&acc);
                Ok(())
            })
            .unwrap();
            next.push(out);
        }
        prev = next;
    }
    rt.wait_all().unwrap();
    let summary = rt.last_summary().unwrap();
    assert!(
        summary.makespan >= summary.critical_path_lower_bound - 1e-9,
        "makespan {} under the critical-path bound {}",
        summary.makespan,
        summary.critical_path_lower_bound
    );
    summary.makespan
}

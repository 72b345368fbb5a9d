use super::*;
use crate::devices::Topology;
use crate::scheduler::PolicyKind;

fn rt_with(devices: usize) -> Runtime {
    Runtime::new(Topology::cpu_only(devices), RunOptions::default()).unwrap()
}

fn traced_rt(devices: usize, policy: PolicyKind) -> Runtime {
    Runtime::new(
        Topology::cpu_only(devices),
        RunOptions {
            policy,
            record_trace: true,
            ..RunOptions::default()
        },
    )
    .unwrap()
}

fn scalar(rt: &mut Runtime, v: f32) -> TileHandle {
    rt.register_tile(4, Fill::Const(v)).unwrap()
}

#[test]
fn register_tile_starts_at_version_zero_with_distinct_ids() {
    let mut rt = rt_with(1);
    let a = rt.register_tile(4096, Fill::Zeros).unwrap();
    let b = rt.register_tile(4096, Fill::Zeros).unwrap();
    assert_ne!(a.id, b.id);
    assert_eq!(rt.tile_version(a).unwrap(), 0);
    assert_eq!(rt.read_tile(a).unwrap(), vec![0.0; 1024]);
}

#[test]
fn zero_sized_tiles_are_rejected() {
    let mut rt = rt_with(1);
    assert!(matches!(
        rt.register_tile(0, Fill::Zeros),
        Err(Error::BadTileSize(0))
    ));
}

#[test]
fn write_then_read_produces_an_edge() {
    let mut rt = rt_with(2);
    let a = scalar(&mut rt, 0.0);
    let b = scalar(&mut rt, 0.0);
    let c = scalar(&mut rt, 0.0);
    let fill = rt
        .submit("fill", 1, vec![(a, AccessMode::Write)], move |ctx| {
            ctx.write(0)[0] = 2.0;
            Ok(())
        })
        .unwrap();
    let gemm = rt
        .submit(
            "gemm",
            1,
            vec![
                (a, AccessMode::Read),
                (b, AccessMode::Read),
                (c, AccessMode::ReadWrite),
            ],
            move |ctx| {
                let a = ctx.read(0);
                let b = ctx.read(1);
                let c = ctx.write(2);
                c[0] += a[0] * b[0];
                Ok(())
            },
        )
        .unwrap();
    assert_eq!(rt.task_preds(gemm), vec![fill]);
    rt.wait_all().unwrap();
    assert_eq!(rt.task_state(fill).unwrap(), TaskState::Done);
    assert_eq!(rt.tile_version(a).unwrap(), 1);
}

#[test]
fn two_reads_are_independent() {
    let mut rt = rt_with(1);
    let x = scalar(&mut rt, 1.0);
    let sink1 = scalar(&mut rt, 0.0);
    let sink2 = scalar(&mut rt, 0.0);
    rt.submit(
        "read1",
        1,
        vec![(x, AccessMode::Read), (sink1, AccessMode::Write)],
        |ctx| {
            let v = ctx.read(0)[0];
            ctx.write(1)[0] = v;
            Ok(())
        },
    )
    .unwrap();
    let second = rt
        .submit(
            "read2",
            1,
            vec![(x, AccessMode::Read), (sink2, AccessMode::Write)],
            |ctx| {
                let v = ctx.read(0)[0];
                ctx.write(1)[0] = v;
                Ok(())
            },
        )
        .unwrap();
    assert!(rt.task_preds(second).is_empty());
    rt.wait_all().unwrap();
}

#[test]
fn reduce_tasks_share_no_edges_and_commit_merges_them() {
    let mut rt = rt_with(4);
    let g = scalar(&mut rt, 0.0);
    let mut ids = Vec::new();
    for _ in 0..4 {
        let t = rt
            .submit("acc", 1, vec![(g, AccessMode::Reduce)], |ctx| {
                ctx.write(0)[0] += 1.0;
                Ok(())
            })
            .unwrap();
        ids.push(t);
    }
    for t in &ids {
        assert!(rt.task_preds(*t).is_empty(), "reduces are unordered");
    }
    rt.reduction_commit(g).unwrap();
    rt.wait_all().unwrap();
    assert_eq!(rt.read_tile(g).unwrap()[0], 4.0);
    assert_eq!(rt.tile_version(g).unwrap(), 1, "commit bumps once");
}

#[test]
fn commit_without_pending_reduces_is_a_noop() {
    let mut rt = rt_with(1);
    let g = scalar(&mut rt, 7.0);
    rt.reduction_commit(g).unwrap();
    rt.wait_all().unwrap();
    assert_eq!(rt.read_tile(g).unwrap()[0], 7.0);
    assert_eq!(rt.tile_version(g).unwrap(), 0);
    assert_eq!(rt.task_count(), 0);
}

#[test]
fn reads_after_reduce_observe_committed_data() {
    // The runtime inserts the merge when the access mode switches.
    let mut rt = rt_with(2);
    let g = scalar(&mut rt, 10.0);
    let out = scalar(&mut rt, 0.0);
    for _ in 0..3 {
        rt.submit("acc", 1, vec![(g, AccessMode::Reduce)], |ctx| {
            ctx.write(0)[0] += 2.0;
            Ok(())
        })
        .unwrap();
    }
    rt.submit(
        "copy",
        1,
        vec![(g, AccessMode::Read), (out, AccessMode::Write)],
        |ctx| {
            let v = ctx.read(0)[0];
            ctx.write(1)[0] = v;
            Ok(())
        },
    )
    .unwrap();
    rt.wait_all().unwrap();
    assert_eq!(rt.read_tile(out).unwrap()[0], 16.0);
}

#[test]
fn reduction_is_bitwise_deterministic_across_runs() {
    use rand::Rng;
    use rand::SeedableRng;
    let run = || {
        let mut rt = rt_with(4);
        let g = rt.register_tile(64, Fill::Zeros).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..16 {
            let vals: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            rt.submit("acc", 50, vec![(g, AccessMode::Reduce)], move |ctx| {
                for (o, v) in ctx.write(0).iter_mut().zip(&vals) {
                    *o += v;
                }
                Ok(())
            })
            .unwrap();
        }
        rt.reduction_commit(g).unwrap();
        rt.wait_all().unwrap();
        rt.read_tile(g).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "fixed merge order makes reductions reproducible");
}

#[test]
fn wait_all_on_empty_graph_returns_immediately_and_is_idempotent() {
    let mut rt = rt_with(2);
    rt.wait_all().unwrap();
    let x = scalar(&mut rt, 0.0);
    rt.submit("w", 1, vec![(x, AccessMode::Write)], |ctx| {
        ctx.write(0)[0] = 1.0;
        Ok(())
    })
    .unwrap();
    rt.wait_all().unwrap();
    rt.wait_all().unwrap();
    assert_eq!(rt.read_tile(x).unwrap()[0], 1.0);
}

#[test]
fn independent_tasks_all_complete() {
    let mut rt = rt_with(4);
    let tiles: Vec<_> = (0..16).map(|i| scalar(&mut rt, i as f32)).collect();
    let ids: Vec<_> = tiles
        .iter()
        .map(|&t| {
            rt.submit("inc", 10, vec![(t, AccessMode::ReadWrite)], |ctx| {
                ctx.write(0)[0] += 1.0;
                Ok(())
            })
            .unwrap()
        })
        .collect();
    rt.wait_all().unwrap();
    for (i, (t, id)) in tiles.iter().zip(&ids).enumerate() {
        assert_eq!(rt.task_state(*id).unwrap(), TaskState::Done);
        assert_eq!(rt.read_tile(*t).unwrap()[0], i as f32 + 1.0);
    }
}

#[test]
fn chain_completion_order_matches_submission_order_in_the_trace() {
    for policy in [PolicyKind::EagerFifo, PolicyKind::GreedyEct] {
        let mut rt = traced_rt(3, policy);
        let x = scalar(&mut rt, 0.0);
        for _ in 0..3 {
            rt.submit("step", 100, vec![(x, AccessMode::ReadWrite)], |ctx| {
                ctx.write(0)[0] += 1.0;
                Ok(())
            })
            .unwrap();
        }
        rt.wait_all().unwrap();
        let recs = &rt.trace().tasks;
        assert_eq!(recs.len(), 3);
        let mut by_id: Vec<_> = recs.iter().collect();
        by_id.sort_by_key(|r| r.task);
        for pair in by_id.windows(2) {
            assert!(
                pair[1].start_ns >= pair[0].end_ns,
                "chain tasks run strictly in submission order"
            );
        }
    }
}

#[test]
fn no_task_starts_before_its_predecessors_finish() {
    let mut rt = traced_rt(4, PolicyKind::GreedyEct);
    // Diamond: a -> (b, c) -> d.
    let t = scalar(&mut rt, 0.0);
    let u = scalar(&mut rt, 0.0);
    let v = scalar(&mut rt, 0.0);
    let a = rt
        .submit("a", 50, vec![(t, AccessMode::Write)], |ctx| {
            ctx.write(0)[0] = 1.0;
            Ok(())
        })
        .unwrap();
    let b = rt
        .submit(
            "b",
            70,
            vec![(t, AccessMode::Read), (u, AccessMode::Write)],
            |ctx| {
                let x = ctx.read(0)[0];
                ctx.write(1)[0] = x + 1.0;
                Ok(())
            },
        )
        .unwrap();
    let c = rt
        .submit(
            "c",
            30,
            vec![(t, AccessMode::Read), (v, AccessMode::Write)],
            |ctx| {
                let x = ctx.read(0)[0];
                ctx.write(1)[0] = x + 2.0;
                Ok(())
            },
        )
        .unwrap();
    let d = rt
        .submit(
            "d",
            10,
            vec![
                (u, AccessMode::ReadWrite),
                (v, AccessMode::Read),
            ],
            |ctx| {
                let rhs = ctx.read(1)[0];
                ctx.write(0)[0] += rhs;
                Ok(())
            },
        )
        .unwrap();
    assert_eq!(rt.task_preds(d), vec![b, c]);
    rt.wait_all().unwrap();
    let rec = |id: TaskId| rt.trace().tasks.iter().find(|r| r.task == id).unwrap();
    for (pred, succ) in [(a, b), (a, c), (b, d), (c, d)] {
        assert!(rec(succ).start_ns >= rec(pred).end_ns);
    }
}

#[test]
fn conflicting_duplicate_accesses_are_rejected_but_dual_reads_pass() {
    let mut rt = rt_with(1);
    let x = scalar(&mut rt, 3.0);
    let out = scalar(&mut rt, 0.0);
    let err = rt.submit(
        "bad",
        1,
        vec![(x, AccessMode::Read), (x, AccessMode::Write)],
        |_| Ok(()),
    );
    assert!(matches!(err, Err(Error::ConflictingAccess { .. })));
    // Same tile twice as Read is fine (e.g. gemm(A, A, C)).
    rt.submit(
        "square",
        1,
        vec![
            (x, AccessMode::Read),
            (x, AccessMode::Read),
            (out, AccessMode::Write),
        ],
        |ctx| {
            let a = ctx.read(0);
            let b = ctx.read(1);
            ctx.write(2)[0] = a[0] * b[0];
            Ok(())
        },
    )
    .unwrap();
    rt.wait_all().unwrap();
    assert_eq!(rt.read_tile(out).unwrap()[0], 9.0);
}

#[test]
fn unregistered_handles_are_rejected() {
    let mut rt = rt_with(1);
    let foreign = TileHandle {
        id: TileId(42),
        nbytes: 4,
        home: 0,
    };
    assert!(matches!(
        rt.submit("x", 1, vec![(foreign, AccessMode::Read)], |_| Ok(())),
        Err(Error::UnregisteredTile(TileId(42)))
    ));
}

#[test]
fn kernel_failure_fails_fast_and_poisons_the_run() {
    let mut rt = rt_with(2);
    let x = scalar(&mut rt, 0.0);
    rt.submit("boom", 1, vec![(x, AccessMode::Write)], |_| {
        Err(Error::ShapeMismatch("injected".into()))
    })
    .unwrap();
    let err = rt.wait_all().unwrap_err();
    assert!(matches!(err, Error::KernelFailed { .. }));
    assert!(matches!(rt.wait_all(), Err(Error::RunPoisoned(_))));
}

#[test]
fn kernel_panic_is_reported_as_an_error() {
    let mut rt = rt_with(2);
    let x = scalar(&mut rt, 0.0);
    rt.submit("panicky", 1, vec![(x, AccessMode::Write)], |_| {
        panic!("injected panic")
    })
    .unwrap();
    assert!(matches!(
        rt.wait_all(),
        Err(Error::KernelPanicked { .. })
    ));
}

#[test]
fn versions_increase_with_each_write() {
    let mut rt = rt_with(1);
    let x = scalar(&mut rt, 0.0);
    for _ in 0..3 {
        rt.submit("bump", 1, vec![(x, AccessMode::ReadWrite)], |ctx| {
            ctx.write(0)[0] += 1.0;
            Ok(())
        })
        .unwrap();
    }
    rt.wait_all().unwrap();
    assert_eq!(rt.tile_version(x).unwrap(), 3);
}

#[test]
fn seeded_normal_fill_is_reproducible() {
    let mut rt = rt_with(1);
    let a = rt
        .register_tile(
            256,
            Fill::Normal {
                mean: 0.0,
                std: 0.02,
                seed: 1234,
            },
        )
        .unwrap();
    let b = rt
        .register_tile(
            256,
            Fill::Normal {
                mean: 0.0,
                std: 0.02,
                seed: 1234,
            },
        )
        .unwrap();
    assert_eq!(rt.read_tile(a).unwrap(), rt.read_tile(b).unwrap());
}

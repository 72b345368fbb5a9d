//! Reusable verification cases: per-layer tiled-vs-dense forward
//! equivalence over randomized shapes/tilings, and per-layer backward
//! checks against the dense reference plus finite differences. Both the
//! focused suites and the acceptance suite drive these.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilerun::nn::{AttentionLayer, Embedding, LayerNorm, LinearLayer};
use tilerun::oracle;
use tilerun::tensor::TiledTensor;
use tilerun::{AccessMode, Fill};

use super::{assert_close_f64, cpu_rt, to_f32, to_f64};

pub const FWD_TOL: f64 = 1e-5;
pub const KERNEL_TOL: f64 = 1e-3;
pub const FD_H: f64 = 1e-5;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn rand_tile(rng: &mut ChaCha8Rng, dim: usize) -> usize {
    rng.gen_range(1..=dim)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central finite difference of `f` with respect to `x[idx]`.
pub fn central_diff(x: &mut [f64], idx: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[idx];
    x[idx] = orig + FD_H;
    let plus = f(x);
    x[idx] = orig - FD_H;
    let minus = f(x);
    x[idx] = orig;
    (plus - minus) / (2.0 * FD_H)
}

pub fn spot_indices(len: usize) -> Vec<usize> {
    let mut v = vec![0, len / 3, len / 2, len - 1];
    v.dedup();
    v
}

pub fn assert_fd(analytic: &[f32], mut got_fd: impl FnMut(usize) -> f64, what: &str) {
    for idx in spot_indices(analytic.len()) {
        let fd = got_fd(idx);
        let an = analytic[idx] as f64;
        let tol = KERNEL_TOL * fd.abs().max(an.abs()).max(1.0);
        assert!(
            (fd - an).abs() <= tol,
            "{what}[{idx}]: analytic {an} vs fd {fd}"
        );
    }
}

// ---------------------------------------------------------------------------
// Forward equivalence cases (randomized shapes and tilings)
// ---------------------------------------------------------------------------

pub fn linear_case(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nd, ne) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
    let (s, b) = (rng.gen_range(1..=6), rng.gen_range(1..=4));
    let mut rt = cpu_rt(3);
    let layer = LinearLayer::new(
        &mut rt,
        nd,
        ne,
        rand_tile(&mut rng, nd),
        rand_tile(&mut rng, ne),
        true,
        0.5,
        seed,
    )
    .unwrap();
    let bias = rand_vec(&mut rng, nd, 0.5);
    layer
        .b
        .as_ref()
        .unwrap()
        .value
        .store_dense(&mut rt, &to_f32(&bias))
        .unwrap();
    let x = rand_vec(&mut rng, ne * s * b, 1.0);
    // The embedding-axis tiling must match the weight column tiling.
    let xt = TiledTensor::from_dense(
        &mut rt,
        &to_f32(&x),
        &[ne, s, b],
        &[
            layer.w.value.tile_shape()[1],
            rand_tile(&mut rng, s),
            rand_tile(&mut rng, b),
        ],
    )
    .unwrap();
    let (y, _) = layer.forward(&mut rt, &xt).unwrap();
    rt.wait_all().unwrap();

    let w = to_f64(&layer.w.value.to_dense(&rt).unwrap());
    let want = oracle::linear(&w, &bias, &x, nd, ne, s * b);
    assert_close_f64(&y.to_dense(&rt).unwrap(), &want, FWD_TOL, "linear");
}

pub fn layernorm_case(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ne = rng.gen_range(2..=16);
    let (s, b) = (rng.gen_range(1..=6), rng.gen_range(1..=4));
    let mut rt = cpu_rt(3);
    let layer = LayerNorm::new(&mut rt, ne, rand_tile(&mut rng, ne)).unwrap();
    let gamma = rand_vec(&mut rng, ne, 1.0);
    let beta = rand_vec(&mut rng, ne, 0.5);
    layer.gamma.value.store_dense(&mut rt, &to_f32(&gamma)).unwrap();
    layer.beta.value.store_dense(&mut rt, &to_f32(&beta)).unwrap();
    let x = rand_vec(&mut rng, ne * s * b, 2.0);
    let xt = TiledTensor::from_dense(
        &mut rt,
        &to_f32(&x),
        &[ne, s, b],
        &[
            layer.gamma.value.tile_shape()[0],
            rand_tile(&mut rng, s),
            rand_tile(&mut rng, b),
        ],
    )
    .unwrap();
    let (y, _) = layer.forward(&mut rt, &xt).unwrap();
    rt.wait_all().unwrap();

    let (want, _) = oracle::layernorm(&x, &gamma, &beta, ne, s * b, 1e-5);
    assert_close_f64(&y.to_dense(&rt).unwrap(), &want, FWD_TOL, "layernorm");
}

pub fn attention_case(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.gen_range(1..=3);
    let hs = rng.gen_range(1..=4);
    let ne = heads * hs;
    let (s, b) = (rng.gen_range(1..=6), rng.gen_range(1..=3));
    let causal = rng.gen_bool(0.5);
    let mut rt = cpu_rt(3);
    let layer = AttentionLayer::new(
        &mut rt,
        ne,
        heads,
        rand_tile(&mut rng, ne),
        rand_tile(&mut rng, heads),
        causal,
        0.4,
        seed,
    )
    .unwrap();
    let bq = rand_vec(&mut rng, hs * heads, 0.3);
    let bk = rand_vec(&mut rng, hs * heads, 0.3);
    let bv = rand_vec(&mut rng, hs * heads, 0.3);
    let bo = rand_vec(&mut rng, ne, 0.3);
    layer.bq.value.store_dense(&mut rt, &to_f32(&bq)).unwrap();
    layer.bk.value.store_dense(&mut rt, &to_f32(&bk)).unwrap();
    layer.bv.value.store_dense(&mut rt, &to_f32(&bv)).unwrap();
    layer.bo.value.store_dense(&mut rt, &to_f32(&bo)).unwrap();

    let x = rand_vec(&mut rng, ne * s * b, 1.0);
    let xt = TiledTensor::from_dense(
        &mut rt,
        &to_f32(&x),
        &[ne, s, b],
        &[
            layer.wq.value.tile_shape()[2],
            rand_tile(&mut rng, s),
            rand_tile(&mut rng, b),
        ],
    )
    .unwrap();
    let (y, _) = layer.forward(&mut rt, &xt).unwrap();
    rt.wait_all().unwrap();

    let dims = oracle::DenseDims {
        n_layers: 1,
        embed: ne,
        heads,
        seq: s,
        batch: b,
        vocab: 4,
        causal,
        tied_head: false,
    };
    let params = oracle::AttentionParams {
        wq: &to_f64(&layer.wq.value.to_dense(&rt).unwrap()),
        bq: &bq,
        wk: &to_f64(&layer.wk.value.to_dense(&rt).unwrap()),
        bk: &bk,
        wv: &to_f64(&layer.wv.value.to_dense(&rt).unwrap()),
        bv: &bv,
        wo: &to_f64(&layer.wo.value.to_dense(&rt).unwrap()),
        bo: &bo,
    };
    let (want, _) = oracle::attention(&params, &x, &dims);
    assert_close_f64(&y.to_dense(&rt).unwrap(), &want, FWD_TOL, "attention");
}

pub fn embedding_case(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = rng.gen_range(4..=24);
    let ne = rng.gen_range(2..=10);
    let (s, b) = (rng.gen_range(1..=6), rng.gen_range(1..=4));
    let mut rt = cpu_rt(3);
    let emb = Embedding::new(
        &mut rt,
        vocab,
        ne,
        s,
        rand_tile(&mut rng, ne),
        rand_tile(&mut rng, s),
        0.5,
        seed,
    )
    .unwrap();
    let ids_usize: Vec<usize> = (0..s * b).map(|_| rng.gen_range(0..vocab)).collect();
    let ids_f: Vec<f32> = ids_usize.iter().map(|&v| v as f32).collect();
    let ids = TiledTensor::from_dense(
        &mut rt,
        &ids_f,
        &[s, b],
        &[emb.pos.value.tile_shape()[1], rand_tile(&mut rng, b)],
    )
    .unwrap();
    let (x, _) = emb.forward(&mut rt, &ids).unwrap();
    rt.wait_all().unwrap();

    let tok = to_f64(&emb.table.value.to_dense(&rt).unwrap());
    let pos = to_f64(&emb.pos.value.to_dense(&rt).unwrap());
    let want = oracle::embedding(&tok, &pos, &ids_usize, ne, s, b);
    assert_close_f64(&x.to_dense(&rt).unwrap(), &want, FWD_TOL, "embedding");
}

pub fn gelu_case(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ne, s, b) = (
        rng.gen_range(1..=10),
        rng.gen_range(1..=8),
        rng.gen_range(1..=4),
    );
    let mut rt = cpu_rt(2);
    let x = rand_vec(&mut rng, ne * s * b, 3.0);
    let xt = TiledTensor::from_dense(
        &mut rt,
        &to_f32(&x),
        &[ne, s, b],
        &[
            rand_tile(&mut rng, ne),
            rand_tile(&mut rng, s),
            rand_tile(&mut rng, b),
        ],
    )
    .unwrap();
    let y = tilerun::nn::gelu_forward(&mut rt, &xt).unwrap();
    rt.wait_all().unwrap();
    let want = oracle::gelu(&x);
    assert_close_f64(&y.to_dense(&rt).unwrap(), &want, FWD_TOL, "gelu");
}

/// The two-pass softmax machinery driven directly as a tiled graph over
/// a randomly split axis.
pub fn softmax_case(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(2..=24);
    let cols = rng.gen_range(1..=8);
    let tile_rows = rand_tile(&mut rng, rows);
    let mut rt = cpu_rt(2);
    let x = rand_vec(&mut rng, rows * cols, 6.0);
    let xt =
        TiledTensor::from_dense(&mut rt, &to_f32(&x), &[rows, cols], &[tile_rows, cols]).unwrap();
    let n_tiles = xt.grid()[0];

    let mut stat_handles = Vec::new();
    for _ in 0..n_tiles {
        let m = rt.register_tile(4 * cols as u64, Fill::Zeros).unwrap();
        let z = rt.register_tile(4 * cols as u64, Fill::Zeros).unwrap();
        stat_handles.push((m, z));
    }
    for (i, _, dims, h) in xt.iter_tiles() {
        let (m, z) = stat_handles[i];
        let (r, c) = (dims[0], dims[1]);
        rt.submit(
            "softmax_pass1",
            (3 * r * c) as u64,
            vec![
                (h, AccessMode::Read),
                (m, AccessMode::Write),
                (z, AccessMode::Write),
            ],
            move |ctx| {
                let xv = ctx.read(0);
                let mv = ctx.write(1);
                let zv = ctx.write(2);
                tilerun::kernels::softmax_pass1(xv, r, c, mv, zv)
            },
        )
        .unwrap();
    }
    let gm = rt.register_tile(4 * cols as u64, Fill::Zeros).unwrap();
    let gd = rt.register_tile(4 * cols as u64, Fill::Zeros).unwrap();
    let mut accesses: Vec<_> = stat_handles
        .iter()
        .flat_map(|(m, z)| vec![(*m, AccessMode::Read), (*z, AccessMode::Read)])
        .collect();
    accesses.push((gm, AccessMode::Write));
    accesses.push((gd, AccessMode::Write));
    let nt = n_tiles;
    rt.submit(
        "softmax_combine",
        (2 * nt * cols) as u64,
        accesses,
        move |ctx| {
            let mut parts = Vec::new();
            for i in 0..nt {
                parts.push((ctx.read(2 * i), ctx.read(2 * i + 1)));
            }
            let gmv = ctx.write(2 * nt);
            let gdv = ctx.write(2 * nt + 1);
            tilerun::kernels::softmax_combine(&parts, gmv, gdv)
        },
    )
    .unwrap();
    let pt = TiledTensor::new(&mut rt, &[rows, cols], &[tile_rows, cols], Fill::Zeros).unwrap();
    for (i, _, dims, h) in xt.iter_tiles() {
        let hp = pt.handle_linear(i);
        let (r, c) = (dims[0], dims[1]);
        rt.submit(
            "softmax_pass2",
            (2 * r * c) as u64,
            vec![
                (h, AccessMode::Read),
                (gm, AccessMode::Read),
                (gd, AccessMode::Read),
                (hp, AccessMode::Write),
            ],
            move |ctx| {
                let xv = ctx.read(0);
                let gmv = ctx.read(1);
                let gdv = ctx.read(2);
                tilerun::kernels::softmax_pass2(xv, r, c, gmv, gdv, ctx.write(3))
            },
        )
        .unwrap();
    }
    rt.wait_all().unwrap();
    let want = oracle::softmax_cols(&x, rows, cols);
    let got = pt.to_dense(&rt).unwrap();
    assert_close_f64(&got, &want, FWD_TOL, "softmax");
    for j in 0..cols {
        let s: f32 = (0..rows).map(|i| got[i * cols + j]).sum();
        assert!((s - 1.0).abs() < 1e-6, "column {j} sums to {s}");
    }
}

/// Runs one randomized case of every layer type; returns the case count.
pub fn run_layer_suite(per_layer: usize, base_seed: u64) -> usize {
    let mut cases = 0;
    for i in 0..per_layer {
        let seed = base_seed + i as u64;
        linear_case(seed);
        layernorm_case(seed);
        attention_case(seed);
        embedding_case(seed);
        gelu_case(seed);
        softmax_case(seed);
        cases += 6;
    }
    cases
}

// ---------------------------------------------------------------------------
// Backward checks (dense reference + finite differences)
// ---------------------------------------------------------------------------

pub fn linear_grad_case(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nd, ne, s, b) = (5, 7, 3, 2);
    let cols = s * b;
    let mut rt = cpu_rt(3);
    let layer = LinearLayer::new(&mut rt, nd, ne, 3, 4, true, 0.4, seed).unwrap();
    let bias = rand_vec(&mut rng, nd, 0.4);
    layer
        .b
        .as_ref()
        .unwrap()
        .value
        .store_dense(&mut rt, &to_f32(&bias))
        .unwrap();
    let x = rand_vec(&mut rng, ne * cols, 1.0);
    let g = rand_vec(&mut rng, nd * cols, 1.0);

    let xt = TiledTensor::from_dense(&mut rt, &to_f32(&x), &[ne, s, b], &[4, 2, 1]).unwrap();
    let dy = TiledTensor::from_dense(&mut rt, &to_f32(&g), &[nd, s, b], &[3, 2, 1]).unwrap();
    let (_, cache) = layer.forward(&mut rt, &xt).unwrap();
    let dx = layer.backward(&mut rt, &cache, &dy).unwrap();
    rt.wait_all().unwrap();

    let mut w = to_f64(&layer.w.value.to_dense(&rt).unwrap());
    let (dx_ref, dw_ref, db_ref) = oracle::linear_bwd(&w, &x, &g, nd, ne, cols);
    let dw_got = layer.w.grad.to_dense(&rt).unwrap();
    let db_got = layer.b.as_ref().unwrap().grad.to_dense(&rt).unwrap();
    let dx_got = dx.to_dense(&rt).unwrap();
    assert_close_f64(&dw_got, &dw_ref, KERNEL_TOL, "linear dW");
    assert_close_f64(&db_got, &db_ref, KERNEL_TOL, "linear db");
    assert_close_f64(&dx_got, &dx_ref, KERNEL_TOL, "linear dx");

    // Spot finite differences: objective L = <linear(w, b, x), g>.
    assert_fd(
        &dw_got,
        |idx| {
            central_diff(&mut w, idx, |w| {
                dot(&oracle::linear(w, &bias, &x, nd, ne, cols), &g)
            })
        },
        "linear dW fd",
    );
    let mut x_fd = x.clone();
    assert_fd(
        &dx_got,
        |idx| {
            central_diff(&mut x_fd, idx, |x| {
                dot(&oracle::linear(&w, &bias, x, nd, ne, cols), &g)
            })
        },
        "linear dx fd",
    );
}

pub fn layernorm_grad_case(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ne, s, b) = (6, 4, 2);
    let cols = s * b;
    let mut rt = cpu_rt(3);
    let layer = LayerNorm::new(&mut rt, ne, 4).unwrap();
    let gamma = rand_vec(&mut rng, ne, 1.0);
    let beta = rand_vec(&mut rng, ne, 0.5);
    layer.gamma.value.store_dense(&mut rt, &to_f32(&gamma)).unwrap();
    layer.beta.value.store_dense(&mut rt, &to_f32(&beta)).unwrap();
    let x = rand_vec(&mut rng, ne * cols, 2.0);
    let g = rand_vec(&mut rng, ne * cols, 1.0);

    let xt = TiledTensor::from_dense(&mut rt, &to_f32(&x), &[ne, s, b], &[4, 3, 1]).unwrap();
    let dy = TiledTensor::from_dense(&mut rt, &to_f32(&g), &[ne, s, b], &[4, 3, 1]).unwrap();
    let (_, cache) = layer.forward(&mut rt, &xt).unwrap();
    let dx = layer.backward(&mut rt, &cache, &dy).unwrap();
    rt.wait_all().unwrap();

    let (_, ln_cache) = oracle::layernorm(&x, &gamma, &beta, ne, cols, 1e-5);
    let (dx_ref, dgamma_ref, dbeta_ref) = oracle::layernorm_bwd(&g, &gamma, &ln_cache, ne, cols);
    let dx_got = dx.to_dense(&rt).unwrap();
    assert_close_f64(&dx_got, &dx_ref, KERNEL_TOL, "layernorm dx");
    assert_close_f64(
        &layer.gamma.grad.to_dense(&rt).unwrap(),
        &dgamma_ref,
        KERNEL_TOL,
        "layernorm dgamma",
    );
    assert_close_f64(
        &layer.beta.grad.to_dense(&rt).unwrap(),
        &dbeta_ref,
        KERNEL_TOL,
        "layernorm dbeta",
    );

    let mut x_fd = x.clone();
    assert_fd(
        &dx_got,
        |idx| {
            central_diff(&mut x_fd, idx, |x| {
                dot(&oracle::layernorm(x, &gamma, &beta, ne, cols, 1e-5).0, &g)
            })
        },
        "layernorm dx fd",
    );
}

pub fn gelu_grad_case(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 24;
    let mut rt = cpu_rt(2);
    let x = rand_vec(&mut rng, n, 3.0);
    let g = rand_vec(&mut rng, n, 1.0);
    let xt = TiledTensor::from_dense(&mut rt, &to_f32(&x), &[4, 3, 2], &[2, 2, 1]).unwrap();
    let dyt = TiledTensor::from_dense(&mut rt, &to_f32(&g), &[4, 3, 2], &[2, 2, 1]).unwrap();
    let dx = tilerun::nn::gelu_backward(&mut rt, &xt, &dyt).unwrap();
    rt.wait_all().unwrap();
    let dx_got = dx.to_dense(&rt).unwrap();
    let dx_ref = oracle::gelu_bwd(&x, &g);
    assert_close_f64(&dx_got, &dx_ref, KERNEL_TOL, "gelu dx");
    let mut x_fd = x.clone();
    assert_fd(
        &dx_got,
        |idx| central_diff(&mut x_fd, idx, |x| dot(&oracle::gelu(x), &g)),
        "gelu dx fd",
    );
}

pub fn attention_grad_case(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Embed 8, seq 4, batch 2, two heads of size 4.
    let (heads, hs, s, b) = (2, 4, 4, 2);
    let ne = heads * hs;
    let mut rt = cpu_rt(3);
    let layer = AttentionLayer::new(&mut rt, ne, heads, 3, 1, true, 0.4, seed).unwrap();
    let bq = rand_vec(&mut rng, hs * heads, 0.2);
    let bk = rand_vec(&mut rng, hs * heads, 0.2);
    let bv = rand_vec(&mut rng, hs * heads, 0.2);
    let bo = rand_vec(&mut rng, ne, 0.2);
    layer.bq.value.store_dense(&mut rt, &to_f32(&bq)).unwrap();
    layer.bk.value.store_dense(&mut rt, &to_f32(&bk)).unwrap();
    layer.bv.value.store_dense(&mut rt, &to_f32(&bv)).unwrap();
    layer.bo.value.store_dense(&mut rt, &to_f32(&bo)).unwrap();
    let x = rand_vec(&mut rng, ne * s * b, 1.0);
    let g = rand_vec(&mut rng, ne * s * b, 1.0);

    let xt = TiledTensor::from_dense(&mut rt, &to_f32(&x), &[ne, s, b], &[3, 2, 1]).unwrap();
    let dy = TiledTensor::from_dense(&mut rt, &to_f32(&g), &[ne, s, b], &[3, 2, 1]).unwrap();
    let (_, cache) = layer.forward(&mut rt, &xt).unwrap();
    let dx = layer.backward(&mut rt, &cache, &dy).unwrap();
    rt.wait_all().unwrap();

    let dims = oracle::DenseDims {
        n_layers: 1,
        embed: ne,
        heads,
        seq: s,
        batch: b,
        vocab: 4,
        causal: true,
        tied_head: false,
    };
    let mut wq = to_f64(&layer.wq.value.to_dense(&rt).unwrap());
    let wk = to_f64(&layer.wk.value.to_dense(&rt).unwrap());
    let wv = to_f64(&layer.wv.value.to_dense(&rt).unwrap());
    let wo = to_f64(&layer.wo.value.to_dense(&rt).unwrap());
    let params = oracle::AttentionParams {
        wq: &wq,
        bq: &bq,
        wk: &wk,
        bk: &bk,
        wv: &wv,
        bv: &bv,
        wo: &wo,
        bo: &bo,
    };
    let (_, ocache) = oracle::attention(&params, &x, &dims);
    let grads = oracle::attention_bwd(&params, &ocache, &g, &dims);

    let pairs: Vec<(&str, Vec<f32>, &Vec<f64>)> = vec![
        ("dwq", layer.wq.grad.to_dense(&rt).unwrap(), &grads.dwq),
        ("dwk", layer.wk.grad.to_dense(&rt).unwrap(), &grads.dwk),
        ("dwv", layer.wv.grad.to_dense(&rt).unwrap(), &grads.dwv),
        ("dbq", layer.bq.grad.to_dense(&rt).unwrap(), &grads.dbq),
        ("dbk", layer.bk.grad.to_dense(&rt).unwrap(), &grads.dbk),
        ("dbv", layer.bv.grad.to_dense(&rt).unwrap(), &grads.dbv),
        ("dwo", layer.wo.grad.to_dense(&rt).unwrap(), &grads.dwo),
        ("dbo", layer.bo.grad.to_dense(&rt).unwrap(), &grads.dbo),
        ("dx", dx.to_dense(&rt).unwrap(), &grads.dx),
    ];
    for (name, got, want) in &pairs {
        assert_close_f64(got, want, KERNEL_TOL, &format!("attention {name}"));
    }

    // Finite differences through the query weight and the input.
    let dwq_got = &pairs[0].1;
    assert_fd(
        dwq_got,
        |idx| {
            central_diff(&mut wq, idx, |wq| {
                let p = oracle::AttentionParams {
                    wq,
                    bq: &bq,
                    wk: &wk,
                    bk: &bk,
                    wv: &wv,
                    bv: &bv,
                    wo: &wo,
                    bo: &bo,
                };
                dot(&oracle::attention(&p, &x, &dims).0, &g)
            })
        },
        "attention dwq fd",
    );
    let dx_got = &pairs[8].1;
    let mut x_fd = x.clone();
    assert_fd(
        dx_got,
        |idx| {
            central_diff(&mut x_fd, idx, |x| {
                let p = oracle::AttentionParams {
                    wq: &wq,
                    bq: &bq,
                    wk: &wk,
                    bk: &bk,
                    wv: &wv,
                    bv: &bv,
                    wo: &wo,
                    bo: &bo,
                };
                dot(&oracle::attention(&p, x, &dims).0, &g)
            })
        },
        "attention dx fd",
    );
}

pub fn embedding_grad_case(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vocab, ne, s, b) = (8, 4, 3, 2);
    let mut rt = cpu_rt(2);
    let emb = Embedding::new(&mut rt, vocab, ne, s, 2, 2, 0.4, seed).unwrap();
    // Repeat one id so the scatter accumulates.
    let ids_usize = vec![3usize, 3, 1, 3, 0, 5];
    let ids_f: Vec<f32> = ids_usize.iter().map(|&v| v as f32).collect();
    let ids = TiledTensor::from_dense(&mut rt, &ids_f, &[s, b], &[2, 1]).unwrap();
    let g = rand_vec(&mut rng, ne * s * b, 1.0);
    let dx = TiledTensor::from_dense(&mut rt, &to_f32(&g), &[ne, s, b], &[2, 2, 1]).unwrap();
    let (_, cache) = emb.forward(&mut rt, &ids).unwrap();
    emb.backward(&mut rt, &cache, &dx).unwrap();
    rt.wait_all().unwrap();

    let (dtok_ref, dpos_ref) = oracle::embedding_bwd(&g, &ids_usize, vocab, ne, s, b);
    assert_close_f64(
        &emb.table.grad.to_dense(&rt).unwrap(),
        &dtok_ref,
        KERNEL_TOL,
        "embedding dtable",
    );
    assert_close_f64(
        &emb.pos.grad.to_dense(&rt).unwrap(),
        &dpos_ref,
        KERNEL_TOL,
        "embedding dpos",
    );
}

/// Runs the whole per-layer backward battery once.
pub fn run_gradient_suite(seed: u64) {
    linear_grad_case(seed);
    layernorm_grad_case(seed);
    gelu_grad_case(seed);
    attention_grad_case(seed);
    embedding_grad_case(seed);
}

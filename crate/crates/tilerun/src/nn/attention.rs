//! Multi-head scaled dot-product attention over tiled tensors.
//!
//! Internally the head-size axis stays whole (it is the contraction
//! length of the score and apply gemms) while sequence, batch and head
//! axes follow the configured tile sizes. The score softmax runs as the
//! generic two-pass scheme over key-axis tiles, and every cross-tile
//! contraction accumulates through Reduce mode.

use crate::error::{Error, Result};
use crate::kernels::{self, OutProjDims, ProjDims, ScoreDims};
use crate::runtime::{AccessMode, Fill, Runtime, TileHandle};
use crate::tensor::{TensorGradPair, TiledTensor};

pub struct AttentionLayer {
    /// (head_size, heads, embed), tiled (head_size, tile_heads, tile_embed).
    pub wq: TensorGradPair,
    pub wk: TensorGradPair,
    pub wv: TensorGradPair,
    /// (head_size, heads), tiled (head_size, tile_heads).
    pub bq: TensorGradPair,
    pub bk: TensorGradPair,
    pub bv: TensorGradPair,
    /// (embed, heads, head_size), tiled (tile_embed, tile_heads, head_size).
    pub wo: TensorGradPair,
    /// (embed,), tiled (tile_embed).
    pub bo: TensorGradPair,
    pub embed: usize,
    pub heads: usize,
    pub head_size: usize,
    pub causal: bool,
}

pub struct AttentionCache {
    x: TiledTensor,
    q4: TiledTensor,
    k4: TiledTensor,
    v4: TiledTensor,
    p: TiledTensor,
    b4: TiledTensor,
}

impl AttentionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rt: &mut Runtime,
        embed: usize,
        heads: usize,
        tile_embed: usize,
        tile_heads: usize,
        causal: bool,
        init_std: f32,
        seed: u64,
    ) -> Result<Self> {
        if embed % heads != 0 {
            return Err(Error::Config(format!(
                "embedding size {embed} not divisible by head count {heads}"
            )));
        }
        let hs = embed / heads;
        let norm = |s: u64| Fill::Normal {
            mean: 0.0,
            std: init_std,
            seed: s,
        };
        let wq = TensorGradPair::new(rt, &[hs, heads, embed], &[hs, tile_heads, tile_embed], norm(seed))?;
        let wk = TensorGradPair::new(rt, &[hs, heads, embed], &[hs, tile_heads, tile_embed], norm(seed + 1))?;
        let wv = TensorGradPair::new(rt, &[hs, heads, embed], &[hs, tile_heads, tile_embed], norm(seed + 2))?;
        let bq = TensorGradPair::new(rt, &[hs, heads], &[hs, tile_heads], Fill::Zeros)?;
        let bk = TensorGradPair::new(rt, &[hs, heads], &[hs, tile_heads], Fill::Zeros)?;
        let bv = TensorGradPair::new(rt, &[hs, heads], &[hs, tile_heads], Fill::Zeros)?;
        let wo = TensorGradPair::new(rt, &[embed, heads, hs], &[tile_embed, tile_heads, hs], norm(seed + 3))?;
        let bo = TensorGradPair::new(rt, &[embed], &[tile_embed], Fill::Zeros)?;
        Ok(AttentionLayer {
            wq,
            wk,
            wv,
            bq,
            bk,
            bv,
            wo,
            bo,
            embed,
            heads,
            head_size: hs,
            causal,
        })
    }

    fn scale(&self) -> f32 {
        1.0 / (self.head_size as f32).sqrt()
    }

    /// Projects x into one of q/k/v: out[c, s, b, h] = W x + bias.
    fn project(
        &self,
        rt: &mut Runtime,
        w: &TensorGradPair,
        bias: &TensorGradPair,
        x: &TiledTensor,
        tile_heads: usize,
        name: &'static str,
    ) -> Result<TiledTensor> {
        let (seq, batch) = (x.shape()[1], x.shape()[2]);
        let (ts, tb) = (x.tile_shape()[1], x.tile_shape()[2]);
        let out = TiledTensor::new(
            rt,
            &[self.head_size, seq, batch, self.heads],
            &[self.head_size, ts, tb, tile_heads],
            Fill::Zeros,
        )?;
        for j in 0..out.grid()[1] {
            for k in 0..out.grid()[2] {
                for m in 0..out.grid()[3] {
                    let hout = out.handle_at(&[0, j, k, m]);
                    let od = out.tile_dims(&[0, j, k, m]);
                    let (c, s, b, h) = (od[0], od[1], od[2], od[3]);
                    let hb = bias.value.handle_at(&[0, m]);
                    rt.submit(
                        "attn_bias",
                        (c * s * b * h) as u64,
                        vec![(hb, AccessMode::Read), (hout, AccessMode::Write)],
                        move |ctx| {
                            let bv = ctx.read(0);
                            kernels::attn_bias_broadcast(bv, ctx.write(1), c, s, b, h)
                        },
                    )?;
                    for l in 0..x.grid()[0] {
                        let hw = w.value.handle_at(&[0, m, l]);
                        let hx = x.handle_at(&[l, j, k]);
                        let e = x.tile_dims(&[l, j, k])[0];
                        let dims = ProjDims { c, s, b, h, e };
                        rt.submit(
                            name,
                            2 * (c * s * b * h * e) as u64,
                            vec![
                                (hw, AccessMode::Read),
                                (hx, AccessMode::Read),
                                (hout, AccessMode::Reduce),
                            ],
                            move |ctx| {
                                let wv = ctx.read(0);
                                let xv = ctx.read(1);
                                kernels::attn_proj(wv, xv, ctx.write(2), dims)
                            },
                        )?;
                    }
                    rt.reduction_commit(hout)?;
                }
            }
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        rt: &mut Runtime,
        x: &TiledTensor,
    ) -> Result<(TiledTensor, AttentionCache)> {
        if x.ndim() != 3 || x.shape()[0] != self.embed {
            return Err(Error::ShapeMismatch(format!(
                "attention expects ({}, S, B), got {:?}",
                self.embed,
                x.shape()
            )));
        }
        if x.tile_shape()[0] != self.wq.value.tile_shape()[2] {
            return Err(Error::ShapeMismatch(format!(
                "input embedding tiling {} incompatible with projection tiling {}",
                x.tile_shape()[0],
                self.wq.value.tile_shape()[2]
            )));
        }
        let tile_heads = self.wq.value.tile_shape()[1];
        let q4 = self.project(rt, &self.wq, &self.bq, x, tile_heads, "attn_proj_q")?;
        let k4 = self.project(rt, &self.wk, &self.bk, x, tile_heads, "attn_proj_k")?;
        let v4 = self.project(rt, &self.wv, &self.bv, x, tile_heads, "attn_proj_v")?;

        let (seq, batch) = (x.shape()[1], x.shape()[2]);
        let (ts, tb) = (x.tile_shape()[1], x.tile_shape()[2]);
        let th = tile_heads;
        let scale = self.scale();
        let causal = self.causal;

        // scores[i, j, b, h]: per-(key-tile, query-tile) gemms.
        let scores = TiledTensor::new(
            rt,
            &[seq, seq, batch, self.heads],
            &[ts, ts, tb, th],
            Fill::Zeros,
        )?;
        for ik in 0..scores.grid()[0] {
            for jq in 0..scores.grid()[1] {
                for k in 0..scores.grid()[2] {
                    for m in 0..scores.grid()[3] {
                        let hsc = scores.handle_at(&[ik, jq, k, m]);
                        let sd = scores.tile_dims(&[ik, jq, k, m]);
                        let hk = k4.handle_at(&[0, ik, k, m]);
                        let hq = q4.handle_at(&[0, jq, k, m]);
                        let dims = ScoreDims {
                            c: self.head_size,
                            sk: sd[0],
                            key_lo: ik * ts,
                            sq: sd[1],
                            query_lo: jq * ts,
                            b: sd[2],
                            h: sd[3],
                        };
                        rt.submit(
                            "attn_scores",
                            2 * (self.head_size * sd[0] * sd[1] * sd[2] * sd[3]) as u64,
                            vec![
                                (hk, AccessMode::Read),
                                (hq, AccessMode::Read),
                                (hsc, AccessMode::Write),
                            ],
                            move |ctx| {
                                let kv = ctx.read(0);
                                let qv = ctx.read(1);
                                kernels::attn_scores(kv, qv, ctx.write(2), dims, scale, causal)
                            },
                        )?;
                    }
                }
            }
        }

        let p = softmax_over_key_tiles(rt, &scores)?;

        // b4[c, j, b, h] = sum over key tiles of V P.
        let b4 = TiledTensor::new(
            rt,
            &[self.head_size, seq, batch, self.heads],
            &[self.head_size, ts, tb, th],
            Fill::Zeros,
        )?;
        for jq in 0..b4.grid()[1] {
            for k in 0..b4.grid()[2] {
                for m in 0..b4.grid()[3] {
                    let hb4 = b4.handle_at(&[0, jq, k, m]);
                    let bd = b4.tile_dims(&[0, jq, k, m]);
                    for ik in 0..p.grid()[0] {
                        let hv = v4.handle_at(&[0, ik, k, m]);
                        let hp = p.handle_at(&[ik, jq, k, m]);
                        let sk = p.tile_dims(&[ik, jq, k, m])[0];
                        let (c, sq, b, h) = (bd[0], bd[1], bd[2], bd[3]);
                        rt.submit(
                            "attn_apply",
                            2 * (c * sk * sq * b * h) as u64,
                            vec![
                                (hv, AccessMode::Read),
                                (hp, AccessMode::Read),
                                (hb4, AccessMode::Reduce),
                            ],
                            move |ctx| {
                                let vv = ctx.read(0);
                                let pv = ctx.read(1);
                                kernels::attn_apply(vv, pv, ctx.write(2), c, sk, sq, b, h)
                            },
                        )?;
                    }
                    rt.reduction_commit(hb4)?;
                }
            }
        }

        // y[e, s, b] = Wo b4 + bo.
        let y = TiledTensor::new(rt, x.shape(), x.tile_shape(), Fill::Zeros)?;
        for (_, coord, dims, hy) in y.iter_tiles() {
            let (e, s, b) = (dims[0], dims[1], dims[2]);
            let hbo = self.bo.value.handle_at(&coord[..1]);
            rt.submit(
                "bias_broadcast",
                (e * s * b) as u64,
                vec![(hbo, AccessMode::Read), (hy, AccessMode::Write)],
                move |ctx| {
                    let bv = ctx.read(0);
                    kernels::bias_broadcast(ctx.write(1), bv, e, s * b)
                },
            )?;
            for m in 0..b4.grid()[3] {
                let hwo = self.wo.value.handle_at(&[coord[0], m, 0]);
                let hb4 = b4.handle_at(&[0, coord[1], coord[2], m]);
                let h = b4.tile_dims(&[0, coord[1], coord[2], m])[3];
                let d = OutProjDims {
                    e,
                    c: self.head_size,
                    s,
                    b,
                    h,
                };
                rt.submit(
                    "attn_out",
                    2 * (e * self.head_size * s * b * h) as u64,
                    vec![
                        (hwo, AccessMode::Read),
                        (hb4, AccessMode::Read),
                        (hy, AccessMode::Reduce),
                    ],
                    move |ctx| {
                        let wv = ctx.read(0);
                        let bv = ctx.read(1);
                        kernels::attn_out(wv, bv, ctx.write(2), d)
                    },
                )?;
            }
            rt.reduction_commit(hy)?;
        }

        Ok((
            y,
            AttentionCache {
                x: x.clone(),
                q4,
                k4,
                v4,
                p,
                b4,
            },
        ))
    }

    pub fn backward(
        &self,
        rt: &mut Runtime,
        cache: &AttentionCache,
        dy: &TiledTensor,
    ) -> Result<TiledTensor> {
        let x = &cache.x;
        let (seq, batch) = (x.shape()[1], x.shape()[2]);
        let (ts, tb) = (x.tile_shape()[1], x.tile_shape()[2]);
        let th = self.wq.value.tile_shape()[1];
        let scale = self.scale();

        // Output projection backward: dwo, dbo, db4.
        for ei in 0..dy.grid()[0] {
            let hdbo = self.bo.grad.handle_at(&[ei]);
            for m in 0..cache.b4.grid()[3] {
                let hdwo = self.wo.grad.handle_at(&[ei, m, 0]);
                for j in 0..dy.grid()[1] {
                    for k in 0..dy.grid()[2] {
                        let hdy = dy.handle_at(&[ei, j, k]);
                        let hb4 = cache.b4.handle_at(&[0, j, k, m]);
                        let dd = dy.tile_dims(&[ei, j, k]);
                        let h = cache.b4.tile_dims(&[0, j, k, m])[3];
                        let d = OutProjDims {
                            e: dd[0],
                            c: self.head_size,
                            s: dd[1],
                            b: dd[2],
                            h,
                        };
                        rt.submit(
                            "attn_out_dw",
                            2 * (d.e * d.c * d.s * d.b * d.h) as u64,
                            vec![
                                (hdy, AccessMode::Read),
                                (hb4, AccessMode::Read),
                                (hdwo, AccessMode::Reduce),
                            ],
                            move |ctx| {
                                let dyv = ctx.read(0);
                                let b4v = ctx.read(1);
                                kernels::attn_out_dw(dyv, b4v, ctx.write(2), d)
                            },
                        )?;
                    }
                }
                rt.reduction_commit(hdwo)?;
            }
            for j in 0..dy.grid()[1] {
                for k in 0..dy.grid()[2] {
                    let hdy = dy.handle_at(&[ei, j, k]);
                    let dd = dy.tile_dims(&[ei, j, k]);
                    let (e, cols) = (dd[0], dd[1] * dd[2]);
                    rt.submit(
                        "attn_out_db",
                        (e * cols) as u64,
                        vec![(hdy, AccessMode::Read), (hdbo, AccessMode::Reduce)],
                        move |ctx| {
                            let dyv = ctx.read(0);
                            kernels::row_sum(dyv, ctx.write(1), e, cols)
                        },
                    )?;
                }
            }
            rt.reduction_commit(hdbo)?;
        }

        let db4 = TiledTensor::new(
            rt,
            cache.b4.shape(),
            cache.b4.tile_shape(),
            Fill::Zeros,
        )?;
        for j in 0..db4.grid()[1] {
            for k in 0..db4.grid()[2] {
                for m in 0..db4.grid()[3] {
                    let hdb4 = db4.handle_at(&[0, j, k, m]);
                    let bd = db4.tile_dims(&[0, j, k, m]);
                    for ei in 0..dy.grid()[0] {
                        let hwo = self.wo.value.handle_at(&[ei, m, 0]);
                        let hdy = dy.handle_at(&[ei, j, k]);
                        let e = dy.tile_dims(&[ei, j, k])[0];
                        let d = OutProjDims {
                            e,
                            c: bd[0],
                            s: bd[1],
                            b: bd[2],
                            h: bd[3],
                        };
                        rt.submit(
                            "attn_out_dx",
                            2 * (d.e * d.c * d.s * d.b * d.h) as u64,
                            vec![
                                (hwo, AccessMode::Read),
                                (hdy, AccessMode::Read),
                                (hdb4, AccessMode::Reduce),
                            ],
                            move |ctx| {
                                let wv = ctx.read(0);
                                let dyv = ctx.read(1);
                                kernels::attn_out_dx(wv, dyv, ctx.write(2), d)
                            },
                        )?;
                    }
                    rt.reduction_commit(hdb4)?;
                }
            }
        }

        // dp[i, j, b, h] then softmax backward to ds.
        let dp = TiledTensor::new(rt, cache.p.shape(), cache.p.tile_shape(), Fill::Zeros)?;
        for ik in 0..dp.grid()[0] {
            for jq in 0..dp.grid()[1] {
                for k in 0..dp.grid()[2] {
                    for m in 0..dp.grid()[3] {
                        let hdp = dp.handle_at(&[ik, jq, k, m]);
                        let pd = dp.tile_dims(&[ik, jq, k, m]);
                        let hv = cache.v4.handle_at(&[0, ik, k, m]);
                        let hdb4 = db4.handle_at(&[0, jq, k, m]);
                        let (c, sk, sq, b, h) =
                            (self.head_size, pd[0], pd[1], pd[2], pd[3]);
                        rt.submit(
                            "attn_dp",
                            2 * (c * sk * sq * b * h) as u64,
                            vec![
                                (hv, AccessMode::Read),
                                (hdb4, AccessMode::Read),
                                (hdp, AccessMode::Write),
                            ],
                            move |ctx| {
                                let vv = ctx.read(0);
                                let dbv = ctx.read(1);
                                kernels::attn_dp(vv, dbv, ctx.write(2), c, sk, sq, b, h)
                            },
                        )?;
                    }
                }
            }
        }

        // dv[c, i, b, h] += P db4 over query tiles.
        let dv4 = TiledTensor::new(rt, cache.v4.shape(), cache.v4.tile_shape(), Fill::Zeros)?;
        for ik in 0..cache.p.grid()[0] {
            for k in 0..cache.p.grid()[2] {
                for m in 0..cache.p.grid()[3] {
                    let hdv = dv4.handle_at(&[0, ik, k, m]);
                    let vd = dv4.tile_dims(&[0, ik, k, m]);
                    for jq in 0..cache.p.grid()[1] {
                        let hp = cache.p.handle_at(&[ik, jq, k, m]);
                        let hdb4 = db4.handle_at(&[0, jq, k, m]);
                        let sq = cache.p.tile_dims(&[ik, jq, k, m])[1];
                        let (c, sk, b, h) = (vd[0], vd[1], vd[2], vd[3]);
                        rt.submit(
                            "attn_dv",
                            2 * (c * sk * sq * b * h) as u64,
                            vec![
                                (hp, AccessMode::Read),
                                (hdb4, AccessMode::Read),
                                (hdv, AccessMode::Reduce),
                            ],
                            move |ctx| {
                                let pv = ctx.read(0);
                                let dbv = ctx.read(1);
                                kernels::attn_dv(pv, dbv, ctx.write(2), c, sk, sq, b, h)
                            },
                        )?;
                    }
                    rt.reduction_commit(hdv)?;
                }
            }
        }

        // Softmax backward over the key axis.
        let tdot = TiledTensor::new(
            rt,
            &[seq, batch, self.heads],
            &[ts, tb, th],
            Fill::Zeros,
        )?;
        for jq in 0..cache.p.grid()[1] {
            for k in 0..cache.p.grid()[2] {
                for m in 0..cache.p.grid()[3] {
                    let ht = tdot.handle_at(&[jq, k, m]);
                    for ik in 0..cache.p.grid()[0] {
                        let hp = cache.p.handle_at(&[ik, jq, k, m]);
                        let hdp = dp.handle_at(&[ik, jq, k, m]);
                        let pd = cache.p.tile_dims(&[ik, jq, k, m]);
                        let (sk, sq, b, h) = (pd[0], pd[1], pd[2], pd[3]);
                        rt.submit(
                            "softmax_bwd_dot",
                            2 * (sk * sq * b * h) as u64,
                            vec![
                                (hp, AccessMode::Read),
                                (hdp, AccessMode::Read),
                                (ht, AccessMode::Reduce),
                            ],
                            move |ctx| {
                                let pv = ctx.read(0);
                                let dpv = ctx.read(1);
                                kernels::softmax_bwd_dot(pv, dpv, ctx.write(2), sk, sq, b, h)
                            },
                        )?;
                    }
                    rt.reduction_commit(ht)?;
                }
            }
        }
        let ds = TiledTensor::new(rt, cache.p.shape(), cache.p.tile_shape(), Fill::Zeros)?;
        for ik in 0..ds.grid()[0] {
            for jq in 0..ds.grid()[1] {
                for k in 0..ds.grid()[2] {
                    for m in 0..ds.grid()[3] {
                        let hds = ds.handle_at(&[ik, jq, k, m]);
                        let hp = cache.p.handle_at(&[ik, jq, k, m]);
                        let hdp = dp.handle_at(&[ik, jq, k, m]);
                        let ht = tdot.handle_at(&[jq, k, m]);
                        let pd = ds.tile_dims(&[ik, jq, k, m]);
                        let (sk, sq, b, h) = (pd[0], pd[1], pd[2], pd[3]);
                        rt.submit(
                            "softmax_bwd_apply",
                            3 * (sk * sq * b * h) as u64,
                            vec![
                                (hp, AccessMode::Read),
                                (hdp, AccessMode::Read),
                                (ht, AccessMode::Read),
                                (hds, AccessMode::Write),
                            ],
                            move |ctx| {
                                let pv = ctx.read(0);
                                let dpv = ctx.read(1);
                                let tv = ctx.read(2);
                                kernels::softmax_bwd_apply(pv, dpv, tv, ctx.write(3), sk, sq, b, h)
                            },
                        )?;
                    }
                }
            }
        }

        // dq and dk.
        let dq4 = TiledTensor::new(rt, cache.q4.shape(), cache.q4.tile_shape(), Fill::Zeros)?;
        for jq in 0..ds.grid()[1] {
            for k in 0..ds.grid()[2] {
                for m in 0..ds.grid()[3] {
                    let hdq = dq4.handle_at(&[0, jq, k, m]);
                    let qd = dq4.tile_dims(&[0, jq, k, m]);
                    for ik in 0..ds.grid()[0] {
                        let hk = cache.k4.handle_at(&[0, ik, k, m]);
                        let hds = ds.handle_at(&[ik, jq, k, m]);
                        let sk = ds.tile_dims(&[ik, jq, k, m])[0];
                        let (c, sq, b, h) = (qd[0], qd[1], qd[2], qd[3]);
                        rt.submit(
                            "attn_dq",
                            2 * (c * sk * sq * b * h) as u64,
                            vec![
                                (hk, AccessMode::Read),
                                (hds, AccessMode::Read),
                                (hdq, AccessMode::Reduce),
                            ],
                            move |ctx| {
                                let kv = ctx.read(0);
                                let dsv = ctx.read(1);
                                kernels::attn_dq(kv, dsv, ctx.write(2), c, sk, sq, b, h, scale)
                            },
                        )?;
                    }
                    rt.reduction_commit(hdq)?;
                }
            }
        }
        let dk4 = TiledTensor::new(rt, cache.k4.shape(), cache.k4.tile_shape(), Fill::Zeros)?;
        for ik in 0..ds.grid()[0] {
            for k in 0..ds.grid()[2] {
                for m in 0..ds.grid()[3] {
                    let hdk = dk4.handle_at(&[0, ik, k, m]);
                    let kd = dk4.tile_dims(&[0, ik, k, m]);
                    for jq in 0..ds.grid()[1] {
                        let hq = cache.q4.handle_at(&[0, jq, k, m]);
                        let hds = ds.handle_at(&[ik, jq, k, m]);
                        let sq = ds.tile_dims(&[ik, jq, k, m])[1];
                        let (c, sk, b, h) = (kd[0], kd[1], kd[2], kd[3]);
                        rt.submit(
                            "attn_dk",
                            2 * (c * sk * sq * b * h) as u64,
                            vec![
                                (hq, AccessMode::Read),
                                (hds, AccessMode::Read),
                                (hdk, AccessMode::Reduce),
                            ],
                            move |ctx| {
                                let qv = ctx.read(0);
                                let dsv = ctx.read(1);
                                kernels::attn_dk(qv, dsv, ctx.write(2), c, sk, sq, b, h, scale)
                            },
                        )?;
                    }
                    rt.reduction_commit(hdk)?;
                }
            }
        }

        // Projection backward: all three paths accumulate into one dx.
        let dx = TiledTensor::new(rt, x.shape(), x.tile_shape(), Fill::Zeros)?;
        self.project_backward(rt, &self.wq, &self.bq, x, &dq4, &dx, "q")?;
        self.project_backward(rt, &self.wk, &self.bk, x, &dk4, &dx, "k")?;
        self.project_backward(rt, &self.wv, &self.bv, x, &dv4, &dx, "v")?;
        for &h in dx.tiles() {
            rt.reduction_commit(h)?;
        }
        Ok(dx)
    }

    #[allow(clippy::too_many_arguments)]
    fn project_backward(
        &self,
        rt: &mut Runtime,
        w: &TensorGradPair,
        bias: &TensorGradPair,
        x: &TiledTensor,
        dproj: &TiledTensor,
        dx: &TiledTensor,
        which: &'static str,
    ) -> Result<()> {
        // dw[c, h, e] over (seq, batch) tiles.
        for m in 0..dproj.grid()[3] {
            for l in 0..x.grid()[0] {
                let hdw = w.grad.handle_at(&[0, m, l]);
                for j in 0..dproj.grid()[1] {
                    for k in 0..dproj.grid()[2] {
                        let hdp = dproj.handle_at(&[0, j, k, m]);
                        let hx = x.handle_at(&[l, j, k]);
                        let pd = dproj.tile_dims(&[0, j, k, m]);
                        let e = x.tile_dims(&[l, j, k])[0];
                        let dims = ProjDims {
                            c: pd[0],
                            s: pd[1],
                            b: pd[2],
                            h: pd[3],
                            e,
                        };
                        rt.submit(
                            match which {
                                "q" => "attn_dwq",
                                "k" => "attn_dwk",
                                _ => "attn_dwv",
                            },
                            2 * (dims.c * dims.s * dims.b * dims.h * dims.e) as u64,
                            vec![
                                (hdp, AccessMode::Read),
                                (hx, AccessMode::Read),
                                (hdw, AccessMode::Reduce),
                            ],
                            move |ctx| {
                                let dpv = ctx.read(0);
                                let xv = ctx.read(1);
                                kernels::attn_proj_dw(dpv, xv, ctx.write(2), dims)
                            },
                        )?;
                    }
                }
                rt.reduction_commit(hdw)?;
            }
            // Bias gradient.
            let hdb = bias.grad.handle_at(&[0, m]);
            for j in 0..dproj.grid()[1] {
                for k in 0..dproj.grid()[2] {
                    let hdp = dproj.handle_at(&[0, j, k, m]);
                    let pd = dproj.tile_dims(&[0, j, k, m]);
                    let (c, s, b, h) = (pd[0], pd[1], pd[2], pd[3]);
                    rt.submit(
                        "attn_db",
                        (c * s * b * h) as u64,
                        vec![(hdp, AccessMode::Read), (hdb, AccessMode::Reduce)],
                        move |ctx| {
                            let dpv = ctx.read(0);
                            kernels::attn_proj_db(dpv, ctx.write(1), c, s, b, h)
                        },
                    )?;
                }
            }
            rt.reduction_commit(hdb)?;
        }

        // dx[e, s, b] += W^T dproj, accumulated over head tiles.
        for l in 0..x.grid()[0] {
            for j in 0..dproj.grid()[1] {
                for k in 0..dproj.grid()[2] {
                    let hdx = dx.handle_at(&[l, j, k]);
                    let e = x.tile_dims(&[l, j, k])[0];
                    for m in 0..dproj.grid()[3] {
                        let hw = w.value.handle_at(&[0, m, l]);
                        let hdp = dproj.handle_at(&[0, j, k, m]);
                        let pd = dproj.tile_dims(&[0, j, k, m]);
                        let dims = ProjDims {
                            c: pd[0],
                            s: pd[1],
                            b: pd[2],
                            h: pd[3],
                            e,
                        };
                        rt.submit(
                            "attn_proj_dx",
                            2 * (dims.c * dims.s * dims.b * dims.h * dims.e) as u64,
                            vec![
                                (hw, AccessMode::Read),
                                (hdp, AccessMode::Read),
                                (hdx, AccessMode::Reduce),
                            ],
                            move |ctx| {
                                let wv = ctx.read(0);
                                let dpv = ctx.read(1);
                                kernels::attn_proj_dx(wv, dpv, ctx.write(2), dims)
                            },
                        )?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Two-pass softmax over the key axis of a tiled score tensor: pass one
/// per tile, a combine step per stat tile, pass two per tile.
fn softmax_over_key_tiles(rt: &mut Runtime, scores: &TiledTensor) -> Result<TiledTensor> {
    let n_key_tiles = scores.grid()[0];
    let stat_shape = [scores.shape()[1], scores.shape()[2], scores.shape()[3]];
    let stat_tile = [
        scores.tile_shape()[1],
        scores.tile_shape()[2],
        scores.tile_shape()[3],
    ];

    // One (max, sumexp) tensor pair per key tile.
    let mut maxes = Vec::with_capacity(n_key_tiles);
    let mut sums = Vec::with_capacity(n_key_tiles);
    for _ in 0..n_key_tiles {
        maxes.push(TiledTensor::new(rt, &stat_shape, &stat_tile, Fill::Zeros)?);
        sums.push(TiledTensor::new(rt, &stat_shape, &stat_tile, Fill::Zeros)?);
    }
    for ik in 0..n_key_tiles {
        for jq in 0..scores.grid()[1] {
            for k in 0..scores.grid()[2] {
                for m in 0..scores.grid()[3] {
                    let hsc = scores.handle_at(&[ik, jq, k, m]);
                    let hm = maxes[ik].handle_at(&[jq, k, m]);
                    let hz = sums[ik].handle_at(&[jq, k, m]);
                    let sd = scores.tile_dims(&[ik, jq, k, m]);
                    let (rows, cols) = (sd[0], sd[1] * sd[2] * sd[3]);
                    rt.submit(
                        "softmax_pass1",
                        (3 * rows * cols) as u64,
                        vec![
                            (hsc, AccessMode::Read),
                            (hm, AccessMode::Write),
                            (hz, AccessMode::Write),
                        ],
                        move |ctx| {
                            let x = ctx.read(0);
                            let mv = ctx.write(1);
                            let zv = ctx.write(2);
                            kernels::softmax_pass1(x, rows, cols, mv, zv)
                        },
                    )?;
                }
            }
        }
    }

    let gmax = TiledTensor::new(rt, &stat_shape, &stat_tile, Fill::Zeros)?;
    let gden = TiledTensor::new(rt, &stat_shape, &stat_tile, Fill::Zeros)?;
    for jq in 0..gmax.grid()[0] {
        for k in 0..gmax.grid()[1] {
            for m in 0..gmax.grid()[2] {
                let mut accesses: Vec<(TileHandle, AccessMode)> = Vec::new();
                for ik in 0..n_key_tiles {
                    accesses.push((maxes[ik].handle_at(&[jq, k, m]), AccessMode::Read));
                    accesses.push((sums[ik].handle_at(&[jq, k, m]), AccessMode::Read));
                }
                let hgm = gmax.handle_at(&[jq, k, m]);
                let hgd = gden.handle_at(&[jq, k, m]);
                accesses.push((hgm, AccessMode::Write));
                accesses.push((hgd, AccessMode::Write));
                let cols = hgm.elems();
                rt.submit(
                    "softmax_combine",
                    (2 * n_key_tiles * cols) as u64,
                    accesses,
                    move |ctx| {
                        let mut parts_owned = Vec::with_capacity(n_key_tiles);
                        for ik in 0..n_key_tiles {
                            let m = ctx.read(2 * ik);
                            let z = ctx.read(2 * ik + 1);
                            parts_owned.push((m, z));
                        }
                        let gm = ctx.write(2 * n_key_tiles);
                        let gd = ctx.write(2 * n_key_tiles + 1);
                        kernels::softmax_combine(&parts_owned, gm, gd)
                    },
                )?;
            }
        }
    }

    let p = TiledTensor::new(rt, scores.shape(), scores.tile_shape(), Fill::Zeros)?;
    for ik in 0..n_key_tiles {
        for jq in 0..scores.grid()[1] {
            for k in 0..scores.grid()[2] {
                for m in 0..scores.grid()[3] {
                    let hsc = scores.handle_at(&[ik, jq, k, m]);
                    let hgm = gmax.handle_at(&[jq, k, m]);
                    let hgd = gden.handle_at(&[jq, k, m]);
                    let hp = p.handle_at(&[ik, jq, k, m]);
                    let sd = scores.tile_dims(&[ik, jq, k, m]);
                    let (rows, cols) = (sd[0], sd[1] * sd[2] * sd[3]);
                    rt.submit(
                        "softmax_pass2",
                        (2 * rows * cols) as u64,
                        vec![
                            (hsc, AccessMode::Read),
                            (hgm, AccessMode::Read),
                            (hgd, AccessMode::Read),
                            (hp, AccessMode::Write),
                        ],
                        move |ctx| {
                            let x = ctx.read(0);
                            let gm = ctx.read(1);
                            let gd = ctx.read(2);
                            kernels::softmax_pass2(x, rows, cols, gm, gd, ctx.write(3))
                        },
                    )?;
                }
            }
        }
    }
    Ok(p)
}

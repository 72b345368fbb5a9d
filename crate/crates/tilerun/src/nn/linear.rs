//! Linear layer over the embedding axis: y = W x +. b, built from a
//! grid of gemm tasks with Reduce over the contracted tile axis.

use crate::error::{Error, Result};
use crate::kernels;
use crate::runtime::{AccessMode, Fill, Runtime};
use crate::tensor::{TensorGradPair, TiledTensor};

pub struct LinearLayer {
    /// (out_dim, in_dim), tiled (tile_out, tile_in).
    pub w: TensorGradPair,
    /// (out_dim); absent for the LM head.
    pub b: Option<TensorGradPair>,
    pub out_dim: usize,
    pub in_dim: usize,
}

pub struct LinearCache {
    x: TiledTensor,
}

impl LinearLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rt: &mut Runtime,
        out_dim: usize,
        in_dim: usize,
        tile_out: usize,
        tile_in: usize,
        bias: bool,
        init_std: f32,
        seed: u64,
    ) -> Result<Self> {
        let w = TensorGradPair::new(
            rt,
            &[out_dim, in_dim],
            &[tile_out, tile_in],
            Fill::Normal {
                mean: 0.0,
                std: init_std,
                seed,
            },
        )?;
        let b = if bias {
            Some(TensorGradPair::new(
                rt,
                &[out_dim],
                &[tile_out],
                Fill::Zeros,
            )?)
        } else {
            None
        };
        Ok(LinearLayer {
            w,
            b,
            out_dim,
            in_dim,
        })
    }

    /// Wraps an existing weight pair (tied parameters).
    pub fn from_pair(w: TensorGradPair, out_dim: usize, in_dim: usize) -> Self {
        LinearLayer {
            w,
            b: None,
            out_dim,
            in_dim,
        }
    }

    fn check_input(&self, x: &TiledTensor) -> Result<()> {
        if x.ndim() != 3 || x.shape()[0] != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "linear expects ({}, S, B) input, got {:?}",
                self.in_dim,
                x.shape()
            )));
        }
        // The contraction pairs one weight-column tile with one input
        // embedding tile, so the tilings must agree.
        if x.tile_shape()[0] != self.w.value.tile_shape()[1] {
            return Err(Error::ShapeMismatch(format!(
                "input embedding tiling {} incompatible with weight column tiling {}",
                x.tile_shape()[0],
                self.w.value.tile_shape()[1]
            )));
        }
        Ok(())
    }

    /// y[d, s, b] = sum_e w[d, e] x[e, s, b] + b[d].
    pub fn forward(&self, rt: &mut Runtime, x: &TiledTensor) -> Result<(TiledTensor, LinearCache)> {
        self.check_input(x)?;
        let (seq, batch) = (x.shape()[1], x.shape()[2]);
        let (ts, tb) = (x.tile_shape()[1], x.tile_shape()[2]);
        let tile_out = self.w.value.tile_shape()[0];
        let y = TiledTensor::new(rt, &[self.out_dim, seq, batch], &[tile_out, ts, tb], Fill::Zeros)?;

        let n_out = y.grid()[0];
        let n_in = x.grid()[0];
        for i in 0..n_out {
            for j in 0..x.grid()[1] {
                for k in 0..x.grid()[2] {
                    let hy = y.handle_at(&[i, j, k]);
                    let ydims = y.tile_dims(&[i, j, k]);
                    let (m, cols) = (ydims[0], ydims[1] * ydims[2]);
                    // Canonical content before the reduce merge: the bias
                    // broadcast (or zero for bias-free layers).
                    if let Some(b) = &self.b {
                        let hb = b.value.handle_at(&[i]);
                        rt.submit(
                            "bias_broadcast",
                            (m * cols) as u64,
                            vec![(hb, AccessMode::Read), (hy, AccessMode::Write)],
                            move |ctx| {
                                let bias = ctx.read(0);
                                kernels::bias_broadcast(ctx.write(1), bias, m, cols)
                            },
                        )?;
                    }
                    for l in 0..n_in {
                        let hw = self.w.value.handle_at(&[i, l]);
                        let hx = x.handle_at(&[l, j, k]);
                        let kdim = x.tile_dims(&[l, j, k])[0];
                        rt.submit(
                            "linear_gemm",
                            kernels::gemm_cost(m, kdim, cols),
                            vec![
                                (hw, AccessMode::Read),
                                (hx, AccessMode::Read),
                                (hy, AccessMode::Reduce),
                            ],
                            move |ctx| {
                                let w = ctx.read(0);
                                let xv = ctx.read(1);
                                kernels::gemm(w, xv, ctx.write(2), m, kdim, cols, 1.0, 1.0, false, false)
                            },
                        )?;
                    }
                    rt.reduction_commit(hy)?;
                }
            }
        }
        Ok((y, LinearCache { x: x.clone() }))
    }

    /// dx = W^T dy; dW += dy x^T; db += row sums of dy.
    pub fn backward(
        &self,
        rt: &mut Runtime,
        cache: &LinearCache,
        dy: &TiledTensor,
    ) -> Result<TiledTensor> {
        let x = &cache.x;
        if dy.shape()[0] != self.out_dim || dy.tile_shape()[0] != self.w.value.tile_shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "linear backward got dy {:?} tiled {:?}, expected leading {} tiled {}",
                dy.shape(),
                dy.tile_shape(),
                self.out_dim,
                self.w.value.tile_shape()[0]
            )));
        }
        let dx = TiledTensor::new(rt, x.shape(), x.tile_shape(), Fill::Zeros)?;
        let n_out = dy.grid()[0];
        let n_in = x.grid()[0];
        let (gs, gb) = (x.grid()[1], x.grid()[2]);

        // dx[e, s, b] += sum_d w[d, e] dy[d, s, b].
        for l in 0..n_in {
            for j in 0..gs {
                for k in 0..gb {
                    let hdx = dx.handle_at(&[l, j, k]);
                    let xdims = x.tile_dims(&[l, j, k]);
                    let (e, cols) = (xdims[0], xdims[1] * xdims[2]);
                    for i in 0..n_out {
                        let hw = self.w.value.handle_at(&[i, l]);
                        let hdy = dy.handle_at(&[i, j, k]);
                        let d = dy.tile_dims(&[i, j, k])[0];
                        rt.submit(
                            "linear_dx_gemm",
                            kernels::gemm_cost(e, d, cols),
                            vec![
                                (hw, AccessMode::Read),
                                (hdy, AccessMode::Read),
                                (hdx, AccessMode::Reduce),
                            ],
                            move |ctx| {
                                let w = ctx.read(0);
                                let dyv = ctx.read(1);
                                // op(A) = W^T is (e, d).
                                kernels::gemm(w, dyv, ctx.write(2), e, d, cols, 1.0, 1.0, true, false)
                            },
                        )?;
                    }
                    rt.reduction_commit(hdx)?;
                }
            }
        }

        // dW[d, e] += sum_{s,b} dy[d, sb] x[e, sb].
        for i in 0..n_out {
            for l in 0..n_in {
                let hdw = self.w.grad.handle_at(&[i, l]);
                let wdims = self.w.grad.tile_dims(&[i, l]);
                let (d, e) = (wdims[0], wdims[1]);
                for j in 0..gs {
                    for k in 0..gb {
                        let hdy = dy.handle_at(&[i, j, k]);
                        let hx = x.handle_at(&[l, j, k]);
                        let xd = x.tile_dims(&[l, j, k]);
                        let cols = xd[1] * xd[2];
                        rt.submit(
                            "linear_dw_gemm",
                            kernels::gemm_cost(d, cols, e),
                            vec![
                                (hdy, AccessMode::Read),
                                (hx, AccessMode::Read),
                                (hdw, AccessMode::Reduce),
                            ],
                            move |ctx| {
                                let dyv = ctx.read(0);
                                let xv = ctx.read(1);
                                // op(B) = x^T is (cols, e); x tile is (e, cols).
                                kernels::gemm(dyv, xv, ctx.write(2), d, cols, e, 1.0, 1.0, false, true)
                            },
                        )?;
                    }
                }
                rt.reduction_commit(hdw)?;
            }
        }

        // db[d] += sum_{s,b} dy[d, s, b].
        if let Some(b) = &self.b {
            for i in 0..n_out {
                let hdb = b.grad.handle_at(&[i]);
                let d = b.grad.tile_dims(&[i])[0];
                for j in 0..gs {
                    for k in 0..gb {
                        let hdy = dy.handle_at(&[i, j, k]);
                        let dyd = dy.tile_dims(&[i, j, k]);
                        let cols = dyd[1] * dyd[2];
                        rt.submit(
                            "linear_db",
                            (d * cols) as u64,
                            vec![(hdy, AccessMode::Read), (hdb, AccessMode::Reduce)],
                            move |ctx| {
                                let dyv = ctx.read(0);
                                kernels::row_sum(dyv, ctx.write(1), d, cols)
                            },
                        )?;
                    }
                }
                rt.reduction_commit(hdb)?;
            }
        }
        Ok(dx)
    }
}

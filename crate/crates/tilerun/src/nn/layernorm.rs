//! Layer normalization over the embedding axis as a kernel pipeline:
//! per-tile moment accumulation (Reduce), a finalize step, per-tile
//! normalization, and the affine scale/shift.

use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::LN_EPS;
use crate::runtime::{AccessMode, Fill, Runtime};
use crate::tensor::{TensorGradPair, TiledTensor};

pub struct LayerNorm {
    /// (dim), initialized to ones.
    pub gamma: TensorGradPair,
    /// (dim), initialized to zeros.
    pub beta: TensorGradPair,
    pub dim: usize,
    pub eps: f32,
}

pub struct LayerNormCache {
    xhat: TiledTensor,
    inv_std: TiledTensor,
}

impl LayerNorm {
    pub fn new(rt: &mut Runtime, dim: usize, tile_dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: TensorGradPair::new(rt, &[dim], &[tile_dim], Fill::Const(1.0))?,
            beta: TensorGradPair::new(rt, &[dim], &[tile_dim], Fill::Zeros)?,
            dim,
            eps: LN_EPS,
        })
    }

    fn check_input(&self, x: &TiledTensor) -> Result<()> {
        if x.ndim() != 3 || x.shape()[0] != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "layernorm expects ({}, S, B), got {:?}",
                self.dim,
                x.shape()
            )));
        }
        if x.tile_shape()[0] != self.gamma.value.tile_shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "input embedding tiling {} incompatible with affine tiling {}",
                x.tile_shape()[0],
                self.gamma.value.tile_shape()[0]
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        rt: &mut Runtime,
        x: &TiledTensor,
    ) -> Result<(TiledTensor, LayerNormCache)> {
        self.check_input(x)?;
        let cols_shape = [x.shape()[1], x.shape()[2]];
        let cols_tile = [x.tile_shape()[1], x.tile_shape()[2]];
        let n = self.dim;
        let eps = self.eps;

        // Stable two-pass moments across embedding-axis tiles: the mean
        // reduce first, then the centered squared sum (the raw second
        // moment cancels catastrophically for low-variance columns).
        let sum = TiledTensor::new(rt, &cols_shape, &cols_tile, Fill::Zeros)?;
        for (_, coord, dims, hx) in x.iter_tiles() {
            let hs = sum.handle_at(&coord[1..]);
            let (rows, cols) = (dims[0], dims[1] * dims[2]);
            rt.submit(
                "norm_sum",
                (rows * cols) as u64,
                vec![(hx, AccessMode::Read), (hs, AccessMode::Reduce)],
                move |ctx| {
                    let xv = ctx.read(0);
                    kernels::col_sum(xv, rows, cols, ctx.write(1))
                },
            )?;
        }
        for &h in sum.tiles() {
            rt.reduction_commit(h)?;
        }

        let mean = TiledTensor::new(rt, &cols_shape, &cols_tile, Fill::Zeros)?;
        for (i, _, _, hs) in sum.iter_tiles() {
            let hm = mean.handle_linear(i);
            rt.submit(
                "norm_mean",
                hs.elems() as u64,
                vec![(hs, AccessMode::Read), (hm, AccessMode::Write)],
                move |ctx| {
                    let s = ctx.read(0);
                    kernels::col_mean(s, n, ctx.write(1))
                },
            )?;
        }

        let ss = TiledTensor::new(rt, &cols_shape, &cols_tile, Fill::Zeros)?;
        for (_, coord, dims, hx) in x.iter_tiles() {
            let hm = mean.handle_at(&coord[1..]);
            let hss = ss.handle_at(&coord[1..]);
            let (rows, cols) = (dims[0], dims[1] * dims[2]);
            rt.submit(
                "norm_centered_ss",
                (3 * rows * cols) as u64,
                vec![
                    (hx, AccessMode::Read),
                    (hm, AccessMode::Read),
                    (hss, AccessMode::Reduce),
                ],
                move |ctx| {
                    let xv = ctx.read(0);
                    let m = ctx.read(1);
                    kernels::centered_sum_sq(xv, m, rows, cols, ctx.write(2))
                },
            )?;
        }
        for &h in ss.tiles() {
            rt.reduction_commit(h)?;
        }

        let inv_std = TiledTensor::new(rt, &cols_shape, &cols_tile, Fill::Zeros)?;
        for (i, _, _, hss) in ss.iter_tiles() {
            let hv = inv_std.handle_linear(i);
            rt.submit(
                "norm_inv_std",
                hss.elems() as u64 * 3,
                vec![(hss, AccessMode::Read), (hv, AccessMode::Write)],
                move |ctx| {
                    let s = ctx.read(0);
                    kernels::inv_std_from_ss(s, n, eps, ctx.write(1))
                },
            )?;
        }

        let xhat = TiledTensor::new(rt, x.shape(), x.tile_shape(), Fill::Zeros)?;
        for (i, coord, dims, hx) in x.iter_tiles() {
            let hm = mean.handle_at(&coord[1..]);
            let hv = inv_std.handle_at(&coord[1..]);
            let hxh = xhat.handle_linear(i);
            let (rows, cols) = (dims[0], dims[1] * dims[2]);
            rt.submit(
                "normalize",
                (2 * rows * cols) as u64,
                vec![
                    (hx, AccessMode::Read),
                    (hm, AccessMode::Read),
                    (hv, AccessMode::Read),
                    (hxh, AccessMode::Write),
                ],
                move |ctx| {
                    let xv = ctx.read(0);
                    let m = ctx.read(1);
                    let v = ctx.read(2);
                    kernels::normalize(xv, m, v, rows, cols, ctx.write(3))
                },
            )?;
        }

        let y = TiledTensor::new(rt, x.shape(), x.tile_shape(), Fill::Zeros)?;
        for (i, coord, dims, hxh) in xhat.iter_tiles() {
            let hg = self.gamma.value.handle_at(&coord[..1]);
            let hb = self.beta.value.handle_at(&coord[..1]);
            let hy = y.handle_linear(i);
            let (rows, cols) = (dims[0], dims[1] * dims[2]);
            rt.submit(
                "scale_shift",
                (2 * rows * cols) as u64,
                vec![
                    (hxh, AccessMode::Read),
                    (hg, AccessMode::Read),
                    (hb, AccessMode::Read),
                    (hy, AccessMode::Write),
                ],
                move |ctx| {
                    let xh = ctx.read(0);
                    let g = ctx.read(1);
                    let b = ctx.read(2);
                    kernels::scale_shift(xh, g, b, rows, cols, ctx.write(3))
                },
            )?;
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(
        &self,
        rt: &mut Runtime,
        cache: &LayerNormCache,
        dy: &TiledTensor,
    ) -> Result<TiledTensor> {
        self.check_input(dy)?;
        let xhat = &cache.xhat;
        let cols_shape = [dy.shape()[1], dy.shape()[2]];
        let cols_tile = [dy.tile_shape()[1], dy.tile_shape()[2]];
        let n = self.dim;

        // Per-column contractions over the embedding axis.
        let a = TiledTensor::new(rt, &cols_shape, &cols_tile, Fill::Zeros)?;
        let c = TiledTensor::new(rt, &cols_shape, &cols_tile, Fill::Zeros)?;
        for (i, coord, dims, hdy) in dy.iter_tiles() {
            let hg = self.gamma.value.handle_at(&coord[..1]);
            let hxh = xhat.handle_linear(i);
            let ha = a.handle_at(&coord[1..]);
            let hc = c.handle_at(&coord[1..]);
            let (rows, cols) = (dims[0], dims[1] * dims[2]);
            rt.submit(
                "ln_bwd_stats",
                (4 * rows * cols) as u64,
                vec![
                    (hdy, AccessMode::Read),
                    (hg, AccessMode::Read),
                    (hxh, AccessMode::Read),
                    (ha, AccessMode::Reduce),
                    (hc, AccessMode::Reduce),
                ],
                move |ctx| {
                    let dyv = ctx.read(0);
                    let g = ctx.read(1);
                    let xh = ctx.read(2);
                    let av = ctx.write(3);
                    let cv = ctx.write(4);
                    kernels::ln_bwd_stats(dyv, g, xh, rows, cols, av, cv)
                },
            )?;
        }
        for &h in a.tiles().iter().chain(c.tiles()) {
            rt.reduction_commit(h)?;
        }

        // Parameter gradients.
        for gi in 0..self.gamma.grad.grid()[0] {
            let hdg = self.gamma.grad.handle_at(&[gi]);
            let hdb = self.beta.grad.handle_at(&[gi]);
            for j in 0..dy.grid()[1] {
                for k in 0..dy.grid()[2] {
                    let hdy = dy.handle_at(&[gi, j, k]);
                    let hxh = xhat.handle_at(&[gi, j, k]);
                    let dims = dy.tile_dims(&[gi, j, k]);
                    let (rows, cols) = (dims[0], dims[1] * dims[2]);
                    rt.submit(
                        "ln_dgamma_dbeta",
                        (3 * rows * cols) as u64,
                        vec![
                            (hdy, AccessMode::Read),
                            (hxh, AccessMode::Read),
                            (hdg, AccessMode::Reduce),
                            (hdb, AccessMode::Reduce),
                        ],
                        move |ctx| {
                            let dyv = ctx.read(0);
                            let xh = ctx.read(1);
                            let dg = ctx.write(2);
                            let db = ctx.write(3);
                            kernels::ln_dgamma_dbeta(dyv, xh, rows, cols, dg, db)
                        },
                    )?;
                }
            }
            rt.reduction_commit(hdg)?;
            rt.reduction_commit(hdb)?;
        }

        // Input gradient.
        let dx = TiledTensor::new(rt, dy.shape(), dy.tile_shape(), Fill::Zeros)?;
        for (i, coord, dims, hdy) in dy.iter_tiles() {
            let hg = self.gamma.value.handle_at(&coord[..1]);
            let hxh = xhat.handle_linear(i);
            let hv = cache.inv_std.handle_at(&coord[1..]);
            let ha = a.handle_at(&coord[1..]);
            let hc = c.handle_at(&coord[1..]);
            let hdx = dx.handle_linear(i);
            let (rows, cols) = (dims[0], dims[1] * dims[2]);
            rt.submit(
                "ln_bwd_apply",
                (6 * rows * cols) as u64,
                vec![
                    (hdy, AccessMode::Read),
                    (hg, AccessMode::Read),
                    (hxh, AccessMode::Read),
                    (hv, AccessMode::Read),
                    (ha, AccessMode::Read),
                    (hc, AccessMode::Read),
                    (hdx, AccessMode::Reduce),
                ],
                move |ctx| {
                    let dyv = ctx.read(0);
                    let g = ctx.read(1);
                    let xh = ctx.read(2);
                    let iv = ctx.read(3);
                    let av = ctx.read(4);
                    let cv = ctx.read(5);
                    kernels::ln_bwd_apply(dyv, g, xh, iv, av, cv, n, rows, cols, ctx.write(6))
                },
            )?;
            rt.reduction_commit(hdx)?;
        }
        Ok(dx)
    }
}

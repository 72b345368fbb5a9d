//! Neural-network layers composed of submitted tile tasks, plus the
//! optimizers. Layers never touch tile data directly: forward and
//! backward methods only submit kernels, and all parallelism lives in
//! the runtime underneath.
//!
//! Gradient-producing kernels accumulate with Reduce mode into
//! zero-initialized tensors and are merged at explicit commit points;
//! fully-overwriting kernels use Write mode.

mod attention;
mod embedding;
mod layernorm;
mod linear;
mod optimizer;

pub use attention::{AttentionCache, AttentionLayer};
pub use embedding::{Embedding, EmbeddingCache};
pub use layernorm::{LayerNorm, LayerNormCache};
pub use linear::{LinearCache, LinearLayer};
pub use optimizer::{OptimizerKind, OptimizerState};

use crate::error::Result;
use crate::kernels;
use crate::runtime::{AccessMode, Runtime};
use crate::tensor::TiledTensor;

/// Layer normalization epsilon used throughout the model.
pub const LN_EPS: f32 = 1e-5;

/// Submits zero-fill tasks for every tile of `t` (used to reset
/// persistent gradient tensors at the start of a backward pass).
pub fn zero_tensor(rt: &mut Runtime, t: &TiledTensor) -> Result<()> {
    for (_, _, _, h) in t.iter_tiles() {
        rt.submit(
            "zero_fill",
            h.elems() as u64,
            vec![(h, AccessMode::Write)],
            move |ctx| {
                ctx.write(0).fill(0.0);
                Ok(())
            },
        )?;
    }
    Ok(())
}

/// Commits all pending reductions on every tile of `t`.
pub fn commit_tensor(rt: &mut Runtime, t: &TiledTensor) -> Result<()> {
    for &h in t.tiles() {
        rt.reduction_commit(h)?;
    }
    Ok(())
}

/// out = a + b, tile by tile (all three tiled identically).
pub fn add_tensors(
    rt: &mut Runtime,
    a: &TiledTensor,
    b: &TiledTensor,
) -> Result<TiledTensor> {
    let out = TiledTensor::new(rt, a.shape(), a.tile_shape(), crate::runtime::Fill::Zeros)?;
    for (i, _, _, ha) in a.iter_tiles() {
        let hb = b.handle_linear(i);
        let ho = out.handle_linear(i);
        rt.submit(
            "add",
            ha.elems() as u64,
            vec![
                (ha, AccessMode::Read),
                (hb, AccessMode::Read),
                (ho, AccessMode::Write),
            ],
            move |ctx| {
                let x = ctx.read(0);
                let y = ctx.read(1);
                kernels::add(x, y, ctx.write(2))
            },
        )?;
    }
    Ok(out)
}

/// Elementwise GELU over a tiled tensor.
pub fn gelu_forward(rt: &mut Runtime, x: &TiledTensor) -> Result<TiledTensor> {
    let y = TiledTensor::new(rt, x.shape(), x.tile_shape(), crate::runtime::Fill::Zeros)?;
    for (i, _, _, hx) in x.iter_tiles() {
        let hy = y.handle_linear(i);
        rt.submit(
            "gelu",
            8 * hx.elems() as u64,
            vec![(hx, AccessMode::Read), (hy, AccessMode::Write)],
            move |ctx| {
                let xv = ctx.read(0);
                kernels::gelu_forward(xv, ctx.write(1))
            },
        )?;
    }
    Ok(y)
}

/// dx = dy * gelu'(x), accumulated and committed.
pub fn gelu_backward(
    rt: &mut Runtime,
    x: &TiledTensor,
    dy: &TiledTensor,
) -> Result<TiledTensor> {
    let dx = TiledTensor::new(rt, x.shape(), x.tile_shape(), crate::runtime::Fill::Zeros)?;
    for (i, _, _, hx) in x.iter_tiles() {
        let hdy = dy.handle_linear(i);
        let hdx = dx.handle_linear(i);
        rt.submit(
            "gelu_bwd",
            10 * hx.elems() as u64,
            vec![
                (hx, AccessMode::Read),
                (hdy, AccessMode::Read),
                (hdx, AccessMode::Reduce),
            ],
            move |ctx| {
                let xv = ctx.read(0);
                let dyv = ctx.read(1);
                kernels::gelu_backward(xv, dyv, ctx.write(2))
            },
        )?;
    }
    commit_tensor(rt, &dx)?;
    Ok(dx)
}

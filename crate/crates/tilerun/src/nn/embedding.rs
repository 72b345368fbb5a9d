//! Token embedding (gather/scatter over the vocabulary table) plus
//! learned absolute positional embeddings.
//!
//! The table keeps the vocabulary axis untiled: under sequential task
//! flow, access lists are declared at submission time, before token ids
//! are known, so a gather task must be able to name one tile that
//! covers every possible row of its embedding range.

use crate::error::{Error, Result};
use crate::kernels;
use crate::runtime::{AccessMode, Fill, Runtime};
use crate::tensor::{TensorGradPair, TiledTensor};

pub struct Embedding {
    /// (vocab, embed), tiled (vocab, tile_embed).
    pub table: TensorGradPair,
    /// (embed, seq), tiled (tile_embed, tile_seq).
    pub pos: TensorGradPair,
    pub vocab: usize,
    pub embed: usize,
    pub seq: usize,
}

pub struct EmbeddingCache {
    ids: TiledTensor,
}

impl Embedding {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rt: &mut Runtime,
        vocab: usize,
        embed: usize,
        seq: usize,
        tile_embed: usize,
        tile_seq: usize,
        init_std: f32,
        seed: u64,
    ) -> Result<Self> {
        let table = TensorGradPair::new(
            rt,
            &[vocab, embed],
            &[vocab, tile_embed],
            Fill::Normal {
                mean: 0.0,
                std: init_std,
                seed,
            },
        )?;
        let pos = TensorGradPair::new(
            rt,
            &[embed, seq],
            &[tile_embed, tile_seq],
            Fill::Normal {
                mean: 0.0,
                std: init_std,
                seed: seed.wrapping_add(1),
            },
        )?;
        Ok(Embedding {
            table,
            pos,
            vocab,
            embed,
            seq,
        })
    }

    /// x[e, s, b] = table[ids[s, b], e] + pos[e, s]. The output takes
    /// its embedding tiling from the table and its (seq, batch) tiling
    /// from the ids.
    pub fn forward(
        &self,
        rt: &mut Runtime,
        ids: &TiledTensor,
    ) -> Result<(TiledTensor, EmbeddingCache)> {
        if ids.ndim() != 2 || ids.shape()[0] != self.seq {
            return Err(Error::ShapeMismatch(format!(
                "ids must be ({}, B), got {:?}",
                self.seq,
                ids.shape()
            )));
        }
        if ids.tile_shape()[0] != self.pos.value.tile_shape()[1] {
            return Err(Error::ShapeMismatch(format!(
                "ids sequence tiling {} incompatible with positional tiling {}",
                ids.tile_shape()[0],
                self.pos.value.tile_shape()[1]
            )));
        }
        let batch = ids.shape()[1];
        let te = self.table.value.tile_shape()[1];
        let ts = ids.tile_shape()[0];
        let tb = ids.tile_shape()[1];
        let x = TiledTensor::new(
            rt,
            &[self.embed, self.seq, batch],
            &[te, ts, tb],
            Fill::Zeros,
        )?;
        let vocab = self.vocab;
        for (xi, coord, dims, hx) in x.iter_tiles() {
            let (e_width, s_cols, b_cols) = (dims[0], dims[1], dims[2]);
            let htab = self.table.value.handle_at(&[0, coord[0]]);
            let hids = ids.handle_at(&coord[1..]);
            rt.submit(
                "emb_gather",
                (e_width * s_cols * b_cols) as u64,
                vec![
                    (htab, AccessMode::Read),
                    (hids, AccessMode::Read),
                    (hx, AccessMode::Write),
                ],
                move |ctx| {
                    let tab = ctx.read(0);
                    let idv = ctx.read(1);
                    kernels::embedding_gather(tab, idv, ctx.write(2), vocab, e_width, s_cols * b_cols)
                },
            )?;
            let hpos = self.pos.value.handle_at(&coord[..2]);
            let _ = xi;
            rt.submit(
                "pos_add",
                (e_width * s_cols * b_cols) as u64,
                vec![(hpos, AccessMode::Read), (hx, AccessMode::ReadWrite)],
                move |ctx| {
                    let p = ctx.read(0);
                    kernels::pos_add(ctx.write(1), p, e_width, s_cols, b_cols)
                },
            )?;
        }
        Ok((x, EmbeddingCache { ids: ids.clone() }))
    }

    /// Scatter-add into the table gradient; reduce over batch for the
    /// positional gradient.
    pub fn backward(
        &self,
        rt: &mut Runtime,
        cache: &EmbeddingCache,
        dx: &TiledTensor,
    ) -> Result<()> {
        let ids = &cache.ids;
        let vocab = self.vocab;
        for ei in 0..dx.grid()[0] {
            let hdtab = self.table.grad.handle_at(&[0, ei]);
            for j in 0..dx.grid()[1] {
                for k in 0..dx.grid()[2] {
                    let hdx = dx.handle_at(&[ei, j, k]);
                    let hids = ids.handle_at(&[j, k]);
                    let dims = dx.tile_dims(&[ei, j, k]);
                    let (e_width, cols) = (dims[0], dims[1] * dims[2]);
                    rt.submit(
                        "emb_scatter",
                        (e_width * cols) as u64,
                        vec![
                            (hids, AccessMode::Read),
                            (hdx, AccessMode::Read),
                            (hdtab, AccessMode::Reduce),
                        ],
                        move |ctx| {
                            let idv = ctx.read(0);
                            let dxv = ctx.read(1);
                            kernels::embedding_scatter_add(
                                ctx.write(2),
                                idv,
                                dxv,
                                vocab,
                                e_width,
                                cols,
                            )
                        },
                    )?;
                }
            }
            rt.reduction_commit(hdtab)?;
        }

        for ei in 0..dx.grid()[0] {
            for j in 0..dx.grid()[1] {
                let hdp = self.pos.grad.handle_at(&[ei, j]);
                for k in 0..dx.grid()[2] {
                    let hdx = dx.handle_at(&[ei, j, k]);
                    let dims = dx.tile_dims(&[ei, j, k]);
                    let (e_rows, s_cols, b_cols) = (dims[0], dims[1], dims[2]);
                    rt.submit(
                        "pos_grad",
                        (e_rows * s_cols * b_cols) as u64,
                        vec![(hdx, AccessMode::Read), (hdp, AccessMode::Reduce)],
                        move |ctx| {
                            let dxv = ctx.read(0);
                            kernels::pos_grad(dxv, ctx.write(1), e_rows, s_cols, b_cols)
                        },
                    )?;
                }
                rt.reduction_commit(hdp)?;
            }
        }
        Ok(())
    }
}

//! Dense single-threaded reference implementation of every layer, loss
//! and optimizer, used exclusively by tests as ground truth. It shares
//! no code with the tiled path (independent loops over flat arrays) and
//! computes in f64, so agreement with the tiled f32 path is evidence
//! rather than tautology, and finite-difference checks against it are
//! clean of f32 rounding.
//!
//! Layout conventions mirror the tiled model:
//!   activations (E, S, B), attention tensors (C, S, B, H) with C the
//!   head size and H the head count, score tensors (Sk, Sq, B, H),
//!   qkv weights (C, H, E), output-projection weight (E, H, C),
//!   embeddings (V, E), positional table (E, S), logits (V, S, B).

use std::collections::BTreeMap;

/// Dims of the dense model (mirrors the tiled configuration).
#[derive(Clone, Copy, Debug)]
pub struct DenseDims {
    pub n_layers: usize,
    pub embed: usize,
    pub heads: usize,
    pub seq: usize,
    pub batch: usize,
    pub vocab: usize,
    pub causal: bool,
    pub tied_head: bool,
}

impl DenseDims {
    pub fn head_size(&self) -> usize {
        self.embed / self.heads
    }

    pub fn hidden(&self) -> usize {
        4 * self.embed
    }

    pub fn cols(&self) -> usize {
        self.seq * self.batch
    }
}

// ---------------------------------------------------------------------------
// Individual layers
// ---------------------------------------------------------------------------

/// y[d, col] = sum_e w[d, e] x[e, col] + b[d].
pub fn linear(w: &[f64], b: &[f64], x: &[f64], nd: usize, ne: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; nd * cols];
    for d in 0..nd {
        for col in 0..cols {
            let mut acc = b[d];
            for e in 0..ne {
                acc += w[d * ne + e] * x[e * cols + col];
            }
            y[d * cols + col] = acc;
        }
    }
    y
}

/// Returns (dx, dw, db) for the linear layer above.
pub fn linear_bwd(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    nd: usize,
    ne: usize,
    cols: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; ne * cols];
    let mut dw = vec![0.0; nd * ne];
    let mut db = vec![0.0; nd];
    for d in 0..nd {
        for col in 0..cols {
            let g = dy[d * cols + col];
            db[d] += g;
            for e in 0..ne {
                dw[d * ne + e] += g * x[e * cols + col];
                dx[e * cols + col] += g * w[d * ne + e];
            }
        }
    }
    (dx, dw, db)
}

pub fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| gelu_scalar(v)).collect()
}

pub fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_bwd(x: &[f64], dy: &[f64]) -> Vec<f64> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let u = c * (v + 0.044715 * v * v * v);
            let t = u.tanh();
            let sech2 = 1.0 - t * t;
            g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * c * (1.0 + 3.0 * 0.044715 * v * v))
        })
        .collect()
}

pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes over the embedding axis (rows) at each column.
pub fn layernorm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    ne: usize,
    cols: usize,
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; ne * cols];
    let mut xhat = vec![0.0; ne * cols];
    let mut inv_std = vec![0.0; cols];
    for col in 0..cols {
        let mut mean = 0.0;
        for e in 0..ne {
            mean += x[e * cols + col];
        }
        mean /= ne as f64;
        let mut var = 0.0;
        for e in 0..ne {
            let d = x[e * cols + col] - mean;
            var += d * d;
        }
        var /= ne as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[col] = istd;
        for e in 0..ne {
            let xh = (x[e * cols + col] - mean) * istd;
            xhat[e * cols + col] = xh;
            y[e * cols + col] = gamma[e] * xh + beta[e];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layernorm_bwd(
    dy: &[f64],
    gamma: &[f64],
    cache: &LayerNormCache,
    ne: usize,
    cols: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; ne * cols];
    let mut dgamma = vec![0.0; ne];
    let mut dbeta = vec![0.0; ne];
    for col in 0..cols {
        let mut a = 0.0;
        let mut c = 0.0;
        for e in 0..ne {
            let dxh = dy[e * cols + col] * gamma[e];
            a += dxh;
            c += dxh * cache.xhat[e * cols + col];
        }
        let n = ne as f64;
        for e in 0..ne {
            let dxh = dy[e * cols + col] * gamma[e];
            dx[e * cols + col] =
                cache.inv_std[col] * (dxh - a / n - cache.xhat[e * cols + col] * c / n);
        }
    }
    for e in 0..ne {
        for col in 0..cols {
            dgamma[e] += dy[e * cols + col] * cache.xhat[e * cols + col];
            dbeta[e] += dy[e * cols + col];
        }
    }
    (dx, dgamma, dbeta)
}

/// Softmax over axis 0 with max subtraction.
pub fn softmax_cols(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut p = vec![0.0; rows * cols];
    for j in 0..cols {
        let mut m = f64::NEG_INFINITY;
        for i in 0..rows {
            m = m.max(x[i * cols + j]);
        }
        let mut z = 0.0;
        for i in 0..rows {
            z += (x[i * cols + j] - m).exp();
        }
        for i in 0..rows {
            p[i * cols + j] = (x[i * cols + j] - m).exp() / z;
        }
    }
    p
}

/// x[e, s, b] = tok[ids[s, b], e] + pos[e, s].
pub fn embedding(
    tok: &[f64],
    pos: &[f64],
    ids: &[usize],
    embed: usize,
    seq: usize,
    batch: usize,
) -> Vec<f64> {
    let mut x = vec![0.0; embed * seq * batch];
    for s in 0..seq {
        for b in 0..batch {
            let id = ids[s * batch + b];
            for e in 0..embed {
                x[(e * seq + s) * batch + b] = tok[id * embed + e] + pos[e * seq + s];
            }
        }
    }
    x
}

/// (dtok, dpos) from dx.
pub fn embedding_bwd(
    dx: &[f64],
    ids: &[usize],
    vocab: usize,
    embed: usize,
    seq: usize,
    batch: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dtok = vec![0.0; vocab * embed];
    let mut dpos = vec![0.0; embed * seq];
    for s in 0..seq {
        for b in 0..batch {
            let id = ids[s * batch + b];
            for e in 0..embed {
                let g = dx[(e * seq + s) * batch + b];
                dtok[id * embed + e] += g;
                dpos[e * seq + s] += g;
            }
        }
    }
    (dtok, dpos)
}

/// Batch-mean cross-entropy over the class axis; returns (loss, dlogits).
pub fn cross_entropy(
    logits: &[f64],
    labels: &[usize],
    vocab: usize,
    cols: usize,
) -> (f64, Vec<f64>) {
    let p = softmax_cols(logits, vocab, cols);
    let inv_n = 1.0 / cols as f64;
    let mut loss = 0.0;
    let mut dz = vec![0.0; vocab * cols];
    for j in 0..cols {
        let label = labels[j];
        assert!(label < vocab, "label {label} out of range");
        loss -= p[label * cols + j].max(1e-300).ln();
        for c in 0..vocab {
            dz[c * cols + j] = (p[c * cols + j] - if c == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    (loss * inv_n, dz)
}

pub struct AttentionParams<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
}

pub struct AttentionCache {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub b4: Vec<f64>,
    pub x: Vec<f64>,
}

pub struct AttentionGrads {
    pub dx: Vec<f64>,
    pub dwq: Vec<f64>,
    pub dbq: Vec<f64>,
    pub dwk: Vec<f64>,
    pub dbk: Vec<f64>,
    pub dwv: Vec<f64>,
    pub dbv: Vec<f64>,
    pub dwo: Vec<f64>,
    pub dbo: Vec<f64>,
}

fn project(
    w: &[f64],
    b: &[f64],
    x: &[f64],
    c: usize,
    heads: usize,
    embed: usize,
    seq: usize,
    batch: usize,
) -> Vec<f64> {
    let mut q = vec![0.0; c * seq * batch * heads];
    for ci in 0..c {
        for n in 0..heads {
            for s in 0..seq {
                for bi in 0..batch {
                    let mut acc = b[ci * heads + n];
                    for e in 0..embed {
                        acc += w[(ci * heads + n) * embed + e] * x[(e * seq + s) * batch + bi];
                    }
                    q[((ci * seq + s) * batch + bi) * heads + n] = acc;
                }
            }
        }
    }
    q
}

/// Multi-head scaled dot-product attention with optional causal mask.
pub fn attention(p: &AttentionParams<'_>, x: &[f64], d: &DenseDims) -> (Vec<f64>, AttentionCache) {
    let (c, heads, embed, seq, batch) = (d.head_size(), d.heads, d.embed, d.seq, d.batch);
    let q = project(p.wq, p.bq, x, c, heads, embed, seq, batch);
    let k = project(p.wk, p.bk, x, c, heads, embed, seq, batch);
    let v = project(p.wv, p.bv, x, c, heads, embed, seq, batch);
    let scale = 1.0 / (c as f64).sqrt();

    // scores[i, j, b, n], softmax over i.
    let mut scores = vec![0.0; seq * seq * batch * heads];
    for i in 0..seq {
        for j in 0..seq {
            for bi in 0..batch {
                for n in 0..heads {
                    let out = &mut scores[((i * seq + j) * batch + bi) * heads + n];
                    if d.causal && i > j {
                        *out = -1.0e30;
                        continue;
                    }
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += k[((ci * seq + i) * batch + bi) * heads + n]
                            * q[((ci * seq + j) * batch + bi) * heads + n];
                    }
                    *out = scale * acc;
                }
            }
        }
    }
    let p_attn = softmax_cols(&scores, seq, seq * batch * heads);

    let mut b4 = vec![0.0; c * seq * batch * heads];
    for ci in 0..c {
        for j in 0..seq {
            for bi in 0..batch {
                for n in 0..heads {
                    let mut acc = 0.0;
                    for i in 0..seq {
                        acc += v[((ci * seq + i) * batch + bi) * heads + n]
                            * p_attn[((i * seq + j) * batch + bi) * heads + n];
                    }
                    b4[((ci * seq + j) * batch + bi) * heads + n] = acc;
                }
            }
        }
    }

    let mut y = vec![0.0; embed * seq * batch];
    for e in 0..embed {
        for s in 0..seq {
            for bi in 0..batch {
                let mut acc = p.bo[e];
                for n in 0..heads {
                    for ci in 0..c {
                        acc += p.wo[(e * heads + n) * c + ci]
                            * b4[((ci * seq + s) * batch + bi) * heads + n];
                    }
                }
                y[(e * seq + s) * batch + bi] = acc;
            }
        }
    }
    (
        y,
        AttentionCache {
            q,
            k,
            v,
            p: p_attn,
            b4,
            x: x.to_vec(),
        },
    )
}

pub fn attention_bwd(
    p: &AttentionParams<'_>,
    cache: &AttentionCache,
    dy: &[f64],
    d: &DenseDims,
) -> AttentionGrads {
    let (c, heads, embed, seq, batch) = (d.head_size(), d.heads, d.embed, d.seq, d.batch);
    let scale = 1.0 / (c as f64).sqrt();
    let x = &cache.x;

    // Output projection.
    let mut dwo = vec![0.0; embed * heads * c];
    let mut dbo = vec![0.0; embed];
    let mut db4 = vec![0.0; c * seq * batch * heads];
    for e in 0..embed {
        for s in 0..seq {
            for bi in 0..batch {
                let g = dy[(e * seq + s) * batch + bi];
                dbo[e] += g;
                for n in 0..heads {
                    for ci in 0..c {
                        dwo[(e * heads + n) * c + ci] +=
                            g * cache.b4[((ci * seq + s) * batch + bi) * heads + n];
                        db4[((ci * seq + s) * batch + bi) * heads + n] +=
                            g * p.wo[(e * heads + n) * c + ci];
                    }
                }
            }
        }
    }

    // Attention application.
    let mut dv = vec![0.0; c * seq * batch * heads];
    let mut dp = vec![0.0; seq * seq * batch * heads];
    for ci in 0..c {
        for j in 0..seq {
            for bi in 0..batch {
                for n in 0..heads {
                    let g = db4[((ci * seq + j) * batch + bi) * heads + n];
                    for i in 0..seq {
                        dv[((ci * seq + i) * batch + bi) * heads + n] +=
                            g * cache.p[((i * seq + j) * batch + bi) * heads + n];
                        dp[((i * seq + j) * batch + bi) * heads + n] +=
                            g * cache.v[((ci * seq + i) * batch + bi) * heads + n];
                    }
                }
            }
        }
    }

    // Softmax backward: ds = p * (dp - sum_i p dp).
    let mut ds = vec![0.0; seq * seq * batch * heads];
    for j in 0..seq {
        for bi in 0..batch {
            for n in 0..heads {
                let mut t = 0.0;
                for i in 0..seq {
                    let idx = ((i * seq + j) * batch + bi) * heads + n;
                    t += cache.p[idx] * dp[idx];
                }
                for i in 0..seq {
                    let idx = ((i * seq + j) * batch + bi) * heads + n;
                    ds[idx] = cache.p[idx] * (dp[idx] - t);
                }
            }
        }
    }

    // Score gemms.
    let mut dq = vec![0.0; c * seq * batch * heads];
    let mut dk = vec![0.0; c * seq * batch * heads];
    for i in 0..seq {
        for j in 0..seq {
            for bi in 0..batch {
                for n in 0..heads {
                    let g = scale * ds[((i * seq + j) * batch + bi) * heads + n];
                    for ci in 0..c {
                        dq[((ci * seq + j) * batch + bi) * heads + n] +=
                            g * cache.k[((ci * seq + i) * batch + bi) * heads + n];
                        dk[((ci * seq + i) * batch + bi) * heads + n] +=
                            g * cache.q[((ci * seq + j) * batch + bi) * heads + n];
                    }
                }
            }
        }
    }

    // Projection backward for q, k, v.
    let mut dx = vec![0.0; embed * seq * batch];
    let mut proj_bwd = |dproj: &[f64], w: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut dw = vec![0.0; c * heads * embed];
        let mut db = vec![0.0; c * heads];
        for ci in 0..c {
            for n in 0..heads {
                for s in 0..seq {
                    for bi in 0..batch {
                        let g = dproj[((ci * seq + s) * batch + bi) * heads + n];
                        db[ci * heads + n] += g;
                        for e in 0..embed {
                            dw[(ci * heads + n) * embed + e] += g * x[(e * seq + s) * batch + bi];
                            dx[(e * seq + s) * batch + bi] += g * w[(ci * heads + n) * embed + e];
                        }
                    }
                }
            }
        }
        (dw, db)
    };
    let (dwq, dbq) = proj_bwd(&dq, p.wq);
    let (dwk, dbk) = proj_bwd(&dk, p.wk);
    let (dwv, dbv) = proj_bwd(&dv, p.wv);

    AttentionGrads {
        dx,
        dwq,
        dbq,
        dwk,
        dbk,
        dwv,
        dbv,
        dwo,
        dbo,
    }
}

// ---------------------------------------------------------------------------
// Whole-model forward/backward
// ---------------------------------------------------------------------------

pub type Params = BTreeMap<String, Vec<f64>>;

const LN_EPS: f64 = 1e-5;

/// Dense reference of the full model: embedding + positional table,
/// pre-norm transformer blocks, final norm, LM head, batch-mean loss.
pub struct DenseGpt2 {
    pub dims: DenseDims,
    pub params: Params,
}

struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    x_mid: Vec<f64>,
    ln2: LayerNormCache,
    ln2_out: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    final_out: Vec<f64>,
    pub logits: Vec<f64>,
}

impl DenseGpt2 {
    pub fn new(dims: DenseDims, params: Params) -> Self {
        DenseGpt2 { dims, params }
    }

    fn p(&self, name: &str) -> &[f64] {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing dense parameter `{name}`"))
    }

    fn head_weight_name(&self) -> &'static str {
        if self.dims.tied_head {
            "tok_emb"
        } else {
            "head.w"
        }
    }

    pub fn forward(&self, ids: &[usize], labels: &[usize]) -> (f64, ForwardCache) {
        let d = &self.dims;
        let cols = d.cols();
        let mut x = embedding(self.p("tok_emb"), self.p("pos_emb"), ids, d.embed, d.seq, d.batch);
        let mut blocks = Vec::new();
        for l in 0..d.n_layers {
            let pre = format!("block{l}");
            let (ln1_out, ln1) = layernorm(
                &x,
                self.p(&format!("{pre}.ln1.gamma")),
                self.p(&format!("{pre}.ln1.beta")),
                d.embed,
                cols,
                LN_EPS,
            );
            let attn_params = self.attn_params(l);
            let (attn_out, attn) = attention(&attn_params, &ln1_out, d);
            let x_mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

            let (ln2_out, ln2) = layernorm(
                &x_mid,
                self.p(&format!("{pre}.ln2.gamma")),
                self.p(&format!("{pre}.ln2.beta")),
                d.embed,
                cols,
                LN_EPS,
            );
            let h_pre = linear(
                self.p(&format!("{pre}.mlp.w1")),
                self.p(&format!("{pre}.mlp.b1")),
                &ln2_out,
                d.hidden(),
                d.embed,
                cols,
            );
            let h_act = gelu(&h_pre);
            let mlp_out = linear(
                self.p(&format!("{pre}.mlp.w2")),
                self.p(&format!("{pre}.mlp.b2")),
                &h_act,
                d.embed,
                d.hidden(),
                cols,
            );
            let x_next: Vec<f64> = x_mid.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();
            blocks.push(BlockCache {
                ln1,
                attn,
                x_mid,
                ln2,
                ln2_out,
                h_pre,
                h_act,
            });
            x = x_next;
        }
        let (final_out, final_ln) = layernorm(
            &x,
            self.p("final_ln.gamma"),
            self.p("final_ln.beta"),
            d.embed,
            cols,
            LN_EPS,
        );
        // The LM head carries no bias.
        let zero_bias = vec![0.0; d.vocab];
        let logits = linear(
            self.p(self.head_weight_name()),
            &zero_bias,
            &final_out,
            d.vocab,
            d.embed,
            cols,
        );
        let (loss, _) = cross_entropy(&logits, labels, d.vocab, cols);
        (
            loss,
            ForwardCache {
                blocks,
                final_ln,
                final_out,
                logits,
            },
        )
    }

    fn attn_params(&self, layer: usize) -> AttentionParams<'_> {
        let pre = format!("block{layer}");
        AttentionParams {
            wq: self.p(&format!("{pre}.attn.wq")),
            bq: self.p(&format!("{pre}.attn.bq")),
            wk: self.p(&format!("{pre}.attn.wk")),
            bk: self.p(&format!("{pre}.attn.bk")),
            wv: self.p(&format!("{pre}.attn.wv")),
            bv: self.p(&format!("{pre}.attn.bv")),
            wo: self.p(&format!("{pre}.attn.wo")),
            bo: self.p(&format!("{pre}.attn.bo")),
        }
    }

    /// Full backward pass; returns (loss, gradients by parameter name).
    pub fn backward(&self, ids: &[usize], labels: &[usize]) -> (f64, Params) {
        let d = &self.dims;
        let cols = d.cols();
        let (loss, cache) = self.forward(ids, labels);
        let mut grads: Params = BTreeMap::new();

        let (_, dlogits) = cross_entropy(&cache.logits, labels, d.vocab, cols);
        let head_w = self.p(self.head_weight_name());
        let (dfinal_out, dhead_w, _) =
            linear_bwd(head_w, &cache.final_out, &dlogits, d.vocab, d.embed, cols);
        let (mut dx, dg, db) = layernorm_bwd(
            &dfinal_out,
            self.p("final_ln.gamma"),
            &cache.final_ln,
            d.embed,
            cols,
        );
        grads.insert("final_ln.gamma".into(), dg);
        grads.insert("final_ln.beta".into(), db);

        for l in (0..d.n_layers).rev() {
            let pre = format!("block{l}");
            let bc = &cache.blocks[l];
            // MLP branch.
            let (dh_act, dw2, db2) = linear_bwd(
                self.p(&format!("{pre}.mlp.w2")),
                &bc.h_act,
                &dx,
                d.embed,
                d.hidden(),
                cols,
            );
            let dh_pre = gelu_bwd(&bc.h_pre, &dh_act);
            let (dln2_out, dw1, db1) = linear_bwd(
                self.p(&format!("{pre}.mlp.w1")),
                &bc.ln2_out,
                &dh_pre,
                d.hidden(),
                d.embed,
                cols,
            );
            let (dx_mid_branch, dg2, dbeta2) = layernorm_bwd(
                &dln2_out,
                self.p(&format!("{pre}.ln2.gamma")),
                &bc.ln2,
                d.embed,
                cols,
            );
            let dx_mid: Vec<f64> = dx.iter().zip(&dx_mid_branch).map(|(a, b)| a + b).collect();

            // Attention branch.
            let attn_params = self.attn_params(l);
            let ag = attention_bwd(&attn_params, &bc.attn, &dx_mid, d);
            let (dx_in_branch, dg1, dbeta1) = layernorm_bwd(
                &ag.dx,
                self.p(&format!("{pre}.ln1.gamma")),
                &bc.ln1,
                d.embed,
                cols,
            );
            let dx_in: Vec<f64> = dx_mid.iter().zip(&dx_in_branch).map(|(a, b)| a + b).collect();

            grads.insert(format!("{pre}.mlp.w2"), dw2);
            grads.insert(format!("{pre}.mlp.b2"), db2);
            grads.insert(format!("{pre}.mlp.w1"), dw1);
            grads.insert(format!("{pre}.mlp.b1"), db1);
            grads.insert(format!("{pre}.ln2.gamma"), dg2);
            grads.insert(format!("{pre}.ln2.beta"), dbeta2);
            grads.insert(format!("{pre}.attn.wq"), ag.dwq);
            grads.insert(format!("{pre}.attn.bq"), ag.dbq);
            grads.insert(format!("{pre}.attn.wk"), ag.dwk);
            grads.insert(format!("{pre}.attn.bk"), ag.dbk);
            grads.insert(format!("{pre}.attn.wv"), ag.dwv);
            grads.insert(format!("{pre}.attn.bv"), ag.dbv);
            grads.insert(format!("{pre}.attn.wo"), ag.dwo);
            grads.insert(format!("{pre}.attn.bo"), ag.dbo);
            grads.insert(format!("{pre}.ln1.gamma"), dg1);
            grads.insert(format!("{pre}.ln1.beta"), dbeta1);
            let _ = &bc.x_mid;
            dx = dx_in;
        }
        let (dtok, dpos) = embedding_bwd(&dx, ids, d.vocab, d.embed, d.seq, d.batch);
        grads.insert("pos_emb".into(), dpos);
        if d.tied_head {
            let mut dtok_total = dtok;
            for (g, h) in dtok_total.iter_mut().zip(&dhead_w) {
                *g += h;
            }
            grads.insert("tok_emb".into(), dtok_total);
        } else {
            grads.insert("tok_emb".into(), dtok);
            grads.insert("head.w".into(), dhead_w);
        }
        (loss, grads)
    }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

pub fn sgd_momentum_step(w: &mut [f64], g: &[f64], m: &mut [f64], lr: f64, mu: f64) {
    for i in 0..w.len() {
        m[i] = mu * m[i] + g[i];
        w[i] -= lr * m[i];
    }
}

#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..w.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        if weight_decay != 0.0 {
            w[i] -= lr * weight_decay * w[i];
        }
        w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
    }
}

/// Seeded parameter set matching the tiled model's shapes, for tests
/// that want a dense model independent of the runtime.
pub fn random_params(dims: &DenseDims, seed: u64) -> Params {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let uniform = |n: usize, scale: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    };
    let (e, hs, nh, v, s) = (
        dims.embed,
        dims.head_size(),
        dims.heads,
        dims.vocab,
        dims.seq,
    );
    params.insert("tok_emb".into(), uniform(v * e, 0.4, &mut rng));
    params.insert("pos_emb".into(), uniform(e * s, 0.4, &mut rng));
    for l in 0..dims.n_layers {
        let pre = format!("block{l}");
        params.insert(format!("{pre}.ln1.gamma"), vec![1.0; e]);
        params.insert(format!("{pre}.ln1.beta"), vec![0.0; e]);
        for name in ["wq", "wk", "wv"] {
            params.insert(
                format!("{pre}.attn.{name}"),
                uniform(hs * nh * e, 0.3, &mut rng),
            );
        }
        for name in ["bq", "bk", "bv"] {
            params.insert(format!("{pre}.attn.{name}"), uniform(hs * nh, 0.1, &mut rng));
        }
        params.insert(format!("{pre}.attn.wo"), uniform(e * nh * hs, 0.3, &mut rng));
        params.insert(format!("{pre}.attn.bo"), uniform(e, 0.1, &mut rng));
        params.insert(format!("{pre}.ln2.gamma"), vec![1.0; e]);
        params.insert(format!("{pre}.ln2.beta"), vec![0.0; e]);
        params.insert(format!("{pre}.mlp.w1"), uniform(4 * e * e, 0.3, &mut rng));
        params.insert(format!("{pre}.mlp.b1"), uniform(4 * e, 0.1, &mut rng));
        params.insert(format!("{pre}.mlp.w2"), uniform(e * 4 * e, 0.3, &mut rng));
        params.insert(format!("{pre}.mlp.b2"), uniform(e, 0.1, &mut rng));
    }
    params.insert("final_ln.gamma".into(), vec![1.0; e]);
    params.insert("final_ln.beta".into(), vec![0.0; e]);
    if !dims.tied_head {
        params.insert("head.w".into(), uniform(v * e, 0.3, &mut rng));
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims() -> DenseDims {
        DenseDims {
            n_layers: 1,
            embed: 8,
            heads: 2,
            seq: 3,
            batch: 2,
            vocab: 8,
            causal: true,
            tied_head: false,
        }
    }

    #[test]
    fn softmax_of_equal_inputs_is_uniform() {
        let p = softmax_cols(&[0.0, 0.0], 2, 1);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let c = 16;
        let logits = vec![0.0; c];
        let (loss, _) = cross_entropy(&logits, &[5], c, 1);
        assert!((loss - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // The oracle validates itself before it is trusted as a
        // reference for the tiled path.
        let dims = tiny_dims();
        let params = random_params(&dims, 42);
        let model = DenseGpt2::new(dims, params);
        let ids = [1usize, 4, 2, 7, 0, 3];
        let labels = [4usize, 2, 7, 0, 3, 1];
        let (_, grads) = model.backward(&ids, &labels);

        let h = 1e-5;
        let mut checked = 0usize;
        for (name, g) in &grads {
            let len = g.len();
            // Spot-check a few coordinates of every tensor.
            for idx in [0, len / 2, len - 1] {
                let mut plus = model.params.clone();
                plus.get_mut(name).unwrap()[idx] += h;
                let (lp, _) = DenseGpt2::new(model.dims, plus).forward(&ids, &labels);
                let mut minus = model.params.clone();
                minus.get_mut(name).unwrap()[idx] -= h;
                let (lm, _) = DenseGpt2::new(model.dims, minus).forward(&ids, &labels);
                let fd = (lp - lm) / (2.0 * h);
                let an = g[idx];
                let tol = 1e-3 * fd.abs().max(an.abs()).max(1e-3);
                assert!(
                    (fd - an).abs() <= tol,
                    "{name}[{idx}]: analytic {an} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50, "spot-checked {checked} coordinates");
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let dims = tiny_dims();
        let params = random_params(&dims, 7);
        let model = DenseGpt2::new(dims, params);
        let ids_a = [1usize, 4, 2, 7, 0, 3];
        // Perturb only the last sequence position (s = 2).
        let ids_b = [1usize, 4, 2, 7, 5, 6];
        let labels = [0usize; 6];
        let (_, cache_a) = model.forward(&ids_a, &labels);
        let (_, cache_b) = model.forward(&ids_b, &labels);
        // Logits at earlier positions must be identical.
        for v in 0..model.dims.vocab {
            for s in 0..2 {
                for b in 0..2 {
                    let idx = (v * 3 + s) * 2 + b;
                    assert_eq!(
                        cache_a.logits[idx], cache_b.logits[idx],
                        "position {s} saw a future token"
                    );
                }
            }
        }
    }
}

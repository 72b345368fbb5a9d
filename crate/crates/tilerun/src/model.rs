//! GPT2 assembly on top of the tiled layers, the synthetic-data
//! training loop, and run configuration plumbing (config file, metrics
//! CSV, checkpoints).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::devices::Topology;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{
    add_tensors, commit_tensor, gelu_backward, gelu_forward, zero_tensor, AttentionCache,
    AttentionLayer, Embedding, EmbeddingCache, LayerNorm, LayerNormCache, LinearCache,
    LinearLayer, OptimizerKind, OptimizerState,
};
use crate::runtime::{AccessMode, Fill, RunOptions, Runtime, TileHandle};
use crate::scheduler::PolicyKind;
use crate::tensor::{TensorGradPair, TiledTensor};

const PARAM_INIT_STD: f32 = 0.02;
const CHECKPOINT_MAGIC: &[u8; 4] = b"TLCK";

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GPT2Config {
    pub n_layers: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub vocab_size: usize,
    pub tile_embed: usize,
    pub tile_seq: usize,
    pub tile_batch: usize,
    pub tile_vocab: usize,
    pub tile_heads: usize,
    pub tile_hidden: usize,
    pub seed: u64,
    /// Autoregressive mask inside the attention softmax.
    pub causal: bool,
    /// Share the token embedding as the LM head weight.
    pub tie_lm_head: bool,
}

impl Default for GPT2Config {
    fn default() -> Self {
        GPT2Config {
            n_layers: 2,
            embed_dim: 32,
            n_heads: 2,
            seq_len: 16,
            batch_size: 4,
            vocab_size: 64,
            tile_embed: 16,
            tile_seq: 8,
            tile_batch: 4,
            tile_vocab: 32,
            tile_heads: 2,
            tile_hidden: 32,
            seed: 42,
            causal: true,
            tie_lm_head: false,
        }
    }
}

impl GPT2Config {
    pub fn head_size(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        let dims = [
            ("tile_embed", self.tile_embed, self.embed_dim),
            ("tile_seq", self.tile_seq, self.seq_len),
            ("tile_batch", self.tile_batch, self.batch_size),
            ("tile_vocab", self.tile_vocab, self.vocab_size),
            ("tile_heads", self.tile_heads, self.n_heads),
            ("tile_hidden", self.tile_hidden, self.hidden_dim()),
        ];
        for (name, tile, dim) in dims {
            if tile == 0 || tile > dim {
                return Err(Error::Config(format!(
                    "{name} = {tile} must be in 1..={dim}"
                )));
            }
        }
        if self.seq_len == 0 || self.batch_size == 0 || self.vocab_size < 2 {
            return Err(Error::Config("degenerate model dimensions".into()));
        }
        Ok(())
    }

    /// Canonical parameter list: (name, shape), allocation-free.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (e, hs, nh, v, s) = (
            self.embed_dim,
            self.head_size(),
            self.n_heads,
            self.vocab_size,
            self.seq_len,
        );
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("tok_emb".into(), vec![v, e]),
            ("pos_emb".into(), vec![e, s]),
        ];
        for l in 0..self.n_layers {
            let p = format!("block{l}");
            out.push((format!("{p}.ln1.gamma"), vec![e]));
            out.push((format!("{p}.ln1.beta"), vec![e]));
            for w in ["wq", "wk", "wv"] {
                out.push((format!("{p}.attn.{w}"), vec![hs, nh, e]));
            }
            for b in ["bq", "bk", "bv"] {
                out.push((format!("{p}.attn.{b}"), vec![hs, nh]));
            }
            out.push((format!("{p}.attn.wo"), vec![e, nh, hs]));
            out.push((format!("{p}.attn.bo"), vec![e]));
            out.push((format!("{p}.ln2.gamma"), vec![e]));
            out.push((format!("{p}.ln2.beta"), vec![e]));
            out.push((format!("{p}.mlp.w1"), vec![4 * e, e]));
            out.push((format!("{p}.mlp.b1"), vec![4 * e]));
            out.push((format!("{p}.mlp.w2"), vec![e, 4 * e]));
            out.push((format!("{p}.mlp.b2"), vec![e]));
        }
        out.push(("final_ln.gamma".into(), vec![e]));
        out.push(("final_ln.beta".into(), vec![e]));
        if !self.tie_lm_head {
            out.push(("head.w".into(), vec![v, e]));
        }
        out
    }

    /// Closed-form parameter count (untied head):
    /// 12 L E^2 + 13 L E + (V + S) E + 2 E + V E.
    pub fn parameter_count_formula(&self) -> u64 {
        let (l, e, v, s) = (
            self.n_layers as u64,
            self.embed_dim as u64,
            self.vocab_size as u64,
            self.seq_len as u64,
        );
        let head = if self.tie_lm_head { 0 } else { v * e };
        12 * l * e * e + 13 * l * e + (v + s) * e + 2 * e + head
    }

    /// Analytic floating-point work of one training step: the usual
    /// 6 * params * tokens plus the quadratic attention term.
    pub fn step_flops(&self) -> f64 {
        let p = self.parameter_count_formula() as f64;
        let tokens = (self.seq_len * self.batch_size) as f64;
        let attn = 12.0
            * self.n_layers as f64
            * (self.seq_len * self.seq_len) as f64
            * self.embed_dim as f64
            * self.batch_size as f64;
        6.0 * p * tokens + attn
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DevicesConfig {
    pub gpu_count: usize,
    pub gpu_speed: f64,
    pub gpu_mem_bytes: u64,
    pub gpu_bandwidth: f64,
    pub cpu_count: usize,
    pub cpu_speed: f64,
}

impl Default for DevicesConfig {
    fn default() -> Self {
        DevicesConfig {
            gpu_count: 4,
            gpu_speed: 10.0,
            gpu_mem_bytes: 256 << 20,
            gpu_bandwidth: 8e9,
            cpu_count: 4,
            cpu_speed: 1.0,
        }
    }
}

impl DevicesConfig {
    pub fn topology(&self) -> Result<Topology> {
        let mut devices = Vec::new();
        for _ in 0..self.gpu_count {
            devices.push(crate::devices::DeviceModel::gpu_like(
                devices.len(),
                self.gpu_speed,
                self.gpu_mem_bytes,
                self.gpu_bandwidth,
            ));
        }
        for _ in 0..self.cpu_count {
            devices.push(crate::devices::DeviceModel::cpu_core(
                devices.len(),
                self.cpu_speed,
            ));
        }
        let topo = Topology::new(devices);
        topo.validate()?;
        Ok(topo)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub policy: PolicyKind,
    pub prefetch: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            policy: PolicyKind::GreedyEct,
            prefetch: true,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Fresh uniform tokens every step.
    Random,
    /// A fixed pool of sequences repeated every step.
    Memorize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub dataset: DatasetKind,
    pub data_seed: u64,
    pub n_fixed_sequences: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 20,
            optimizer: OptimizerKind::Adam {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            dataset: DatasetKind::Random,
            data_seed: 7,
            n_fixed_sequences: 4,
        }
    }
}

/// Whole run configuration, as read from the JSON config file.
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: GPT2Config,
    pub devices: DevicesConfig,
    pub scheduler: SchedulerConfig,
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn from_reader(r: impl Read) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_reader(r)?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn run_options(&self, offload: bool, record_trace: bool) -> RunOptions {
        RunOptions {
            policy: self.scheduler.policy,
            offload,
            prefetch: self.scheduler.prefetch,
            record_trace,
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic token streams
// ---------------------------------------------------------------------------

/// Synthetic next-token data: ids and labels, laid out (seq, batch).
pub struct Dataset {
    kind: DatasetKind,
    seed: u64,
    vocab: usize,
    seq: usize,
    batch: usize,
    fixed: Vec<Vec<u32>>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, cfg: &GPT2Config, seed: u64, n_fixed: usize) -> Self {
        let mut fixed = Vec::new();
        if kind == DatasetKind::Memorize {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..n_fixed.max(1) {
                fixed.push(
                    (0..cfg.seq_len + 1)
                        .map(|_| rng.gen_range(0..cfg.vocab_size as u32))
                        .collect(),
                );
            }
        }
        Dataset {
            kind,
            seed,
            vocab: cfg.vocab_size,
            seq: cfg.seq_len,
            batch: cfg.batch_size,
            fixed,
        }
    }

    /// Returns (ids, labels), each seq*batch f32 token indices with
    /// labels the next-token shift of ids.
    pub fn batch(&self, step: usize) -> (Vec<f32>, Vec<f32>) {
        let mut ids = vec![0.0f32; self.seq * self.batch];
        let mut labels = vec![0.0f32; self.seq * self.batch];
        match self.kind {
            DatasetKind::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (step as u64).wrapping_mul(0x9E37_79B9));
                for b in 0..self.batch {
                    let stream: Vec<u32> = (0..self.seq + 1)
                        .map(|_| rng.gen_range(0..self.vocab as u32))
                        .collect();
                    for s in 0..self.seq {
                        ids[s * self.batch + b] = stream[s] as f32;
                        labels[s * self.batch + b] = stream[s + 1] as f32;
                    }
                }
            }
            DatasetKind::Memorize => {
                for b in 0..self.batch {
                    let stream = &self.fixed[b % self.fixed.len()];
                    for s in 0..self.seq {
                        ids[s * self.batch + b] = stream[s] as f32;
                        labels[s * self.batch + b] = stream[s + 1] as f32;
                    }
                }
            }
        }
        (ids, labels)
    }
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

struct Block {
    ln1: LayerNorm,
    attn: AttentionLayer,
    ln2: LayerNorm,
    fc1: LinearLayer,
    fc2: LinearLayer,
}

struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    x_mid: TiledTensor,
    ln2: LayerNormCache,
    fc1: LinearCache,
    h_pre: TiledTensor,
    fc2: LinearCache,
}

pub struct Gpt2Model {
    pub cfg: GPT2Config,
    emb: Embedding,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: LinearLayer,
    ids: TiledTensor,
    labels: TiledTensor,
}

struct StepCache {
    emb: EmbeddingCache,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    head: LinearCache,
    logits: TiledTensor,
    loss: TileHandle,
    dlogits: TiledTensor,
}

impl Gpt2Model {
    pub fn build(rt: &mut Runtime, cfg: &GPT2Config) -> Result<Self> {
        cfg.validate()?;
        let mut seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut next_seed = || {
            seed = seed.wrapping_add(0x1000_0000_1B3);
            seed
        };
        let emb = Embedding::new(
            rt,
            cfg.vocab_size,
            cfg.embed_dim,
            cfg.seq_len,
            cfg.tile_embed,
            cfg.tile_seq,
            PARAM_INIT_STD,
            next_seed(),
        )?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let ln1 = LayerNorm::new(rt, cfg.embed_dim, cfg.tile_embed)?;
            let attn = AttentionLayer::new(
                rt,
                cfg.embed_dim,
                cfg.n_heads,
                cfg.tile_embed,
                cfg.tile_heads,
                cfg.causal,
                PARAM_INIT_STD,
                next_seed(),
            )?;
            let ln2 = LayerNorm::new(rt, cfg.embed_dim, cfg.tile_embed)?;
            let fc1 = LinearLayer::new(
                rt,
                cfg.hidden_dim(),
                cfg.embed_dim,
                cfg.tile_hidden,
                cfg.tile_embed,
                true,
                PARAM_INIT_STD,
                next_seed(),
            )?;
            let fc2 = LinearLayer::new(
                rt,
                cfg.embed_dim,
                cfg.hidden_dim(),
                cfg.tile_embed,
                cfg.tile_hidden,
                true,
                PARAM_INIT_STD,
                next_seed(),
            )?;
            blocks.push(Block {
                ln1,
                attn,
                ln2,
                fc1,
                fc2,
            });
        }
        let final_ln = LayerNorm::new(rt, cfg.embed_dim, cfg.tile_embed)?;
        let head = if cfg.tie_lm_head {
            LinearLayer::from_pair(
                TensorGradPair {
                    value: emb.table.value.clone(),
                    grad: emb.table.grad.clone(),
                },
                cfg.vocab_size,
                cfg.embed_dim,
            )
        } else {
            // Head weight is (vocab, embed) but tiled over the vocab axis
            // for the logits gemm grid.
            LinearLayer::new(
                rt,
                cfg.vocab_size,
                cfg.embed_dim,
                cfg.tile_vocab,
                cfg.tile_embed,
                false,
                PARAM_INIT_STD,
                next_seed(),
            )?
        };
        let ids = TiledTensor::new(
            rt,
            &[cfg.seq_len, cfg.batch_size],
            &[cfg.tile_seq, cfg.tile_batch],
            Fill::Zeros,
        )?;
        let labels = TiledTensor::new(
            rt,
            &[cfg.seq_len, cfg.batch_size],
            &[cfg.tile_seq, cfg.tile_batch],
            Fill::Zeros,
        )?;
        let model = Gpt2Model {
            cfg: cfg.clone(),
            emb,
            blocks,
            final_ln,
            head,
            ids,
            labels,
        };
        model.canonical_init(rt)?;
        Ok(model)
    }

    /// Overwrites every parameter with a seeded initialization derived
    /// from (config seed, parameter name) over the dense layout, so the
    /// starting point does not depend on the tile-shape choice.
    fn canonical_init(&self, rt: &mut Runtime) -> Result<()> {
        for (name, pair) in self.parameters() {
            let n = pair.value.len();
            let data: Vec<f32> = if name.ends_with("gamma") {
                vec![1.0; n]
            } else if name.ends_with("beta")
                || name.contains(".b")
                || name.ends_with("bq")
                || name.ends_with("bk")
                || name.ends_with("bv")
                || name.ends_with("bo")
            {
                vec![0.0; n]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ fnv1a(&name));
                let dist = rand_distr::Normal::new(0.0f32, PARAM_INIT_STD)
                    .expect("valid init distribution");
                (0..n)
                    .map(|_| rand_distr::Distribution::sample(&dist, &mut rng))
                    .collect()
            };
            pair.value.store_dense(rt, &data)?;
        }
        Ok(())
    }

    /// Named parameters in canonical order (a tied head is not listed
    /// twice).
    pub fn parameters(&self) -> Vec<(String, &TensorGradPair)> {
        let mut out: Vec<(String, &TensorGradPair)> = vec![
            ("tok_emb".into(), &self.emb.table),
            ("pos_emb".into(), &self.emb.pos),
        ];
        for (l, blk) in self.blocks.iter().enumerate() {
            let p = format!("block{l}");
            out.push((format!("{p}.ln1.gamma"), &blk.ln1.gamma));
            out.push((format!("{p}.ln1.beta"), &blk.ln1.beta));
            out.push((format!("{p}.attn.wq"), &blk.attn.wq));
            out.push((format!("{p}.attn.wk"), &blk.attn.wk));
            out.push((format!("{p}.attn.wv"), &blk.attn.wv));
            out.push((format!("{p}.attn.bq"), &blk.attn.bq));
            out.push((format!("{p}.attn.bk"), &blk.attn.bk));
            out.push((format!("{p}.attn.bv"), &blk.attn.bv));
            out.push((format!("{p}.attn.wo"), &blk.attn.wo));
            out.push((format!("{p}.attn.bo"), &blk.attn.bo));
            out.push((format!("{p}.ln2.gamma"), &blk.ln2.gamma));
            out.push((format!("{p}.ln2.beta"), &blk.ln2.beta));
            out.push((format!("{p}.mlp.w1"), &blk.fc1.w));
            out.push((
                format!("{p}.mlp.b1"),
                blk.fc1.b.as_ref().expect("mlp has biases"),
            ));
            out.push((format!("{p}.mlp.w2"), &blk.fc2.w));
            out.push((
                format!("{p}.mlp.b2"),
                blk.fc2.b.as_ref().expect("mlp has biases"),
            ));
        }
        out.push(("final_ln.gamma".into(), &self.final_ln.gamma));
        out.push(("final_ln.beta".into(), &self.final_ln.beta));
        if !self.cfg.tie_lm_head {
            out.push(("head.w".into(), &self.head.w));
        }
        out
    }

    /// Actual parameter count, summed over registered tensors.
    pub fn parameter_count(&self) -> u64 {
        self.parameters()
            .iter()
            .map(|(_, p)| p.value.len() as u64)
            .sum()
    }

    fn write_tokens(&self, rt: &mut Runtime, target: &TiledTensor, data: &[f32]) -> Result<()> {
        let shape: Vec<usize> = target.shape().to_vec();
        for (_, coord, dims, h) in target.iter_tiles() {
            let origin: Vec<usize> = coord
                .iter()
                .zip(target.tile_shape())
                .map(|(&c, &t)| c * t)
                .collect();
            let mut block = Vec::with_capacity(dims[0] * dims[1]);
            for s in 0..dims[0] {
                for b in 0..dims[1] {
                    block.push(data[(origin[0] + s) * shape[1] + origin[1] + b]);
                }
            }
            rt.submit(
                "write_tokens",
                block.len() as u64,
                vec![(h, AccessMode::Write)],
                move |ctx| {
                    ctx.write(0).copy_from_slice(&block);
                    Ok(())
                },
            )?;
        }
        Ok(())
    }

    fn forward(&self, rt: &mut Runtime) -> Result<StepCache> {
        let (x0, emb_cache) = self.emb.forward(rt, &self.ids)?;
        let mut x = x0;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (a1, ln1c) = blk.ln1.forward(rt, &x)?;
            let (attn_out, attnc) = blk.attn.forward(rt, &a1)?;
            let x_mid = add_tensors(rt, &x, &attn_out)?;
            let (a2, ln2c) = blk.ln2.forward(rt, &x_mid)?;
            let (h_pre, fc1c) = blk.fc1.forward(rt, &a2)?;
            let h_act = gelu_forward(rt, &h_pre)?;
            let (mlp_out, fc2c) = blk.fc2.forward(rt, &h_act)?;
            let x_next = add_tensors(rt, &x_mid, &mlp_out)?;
            blocks.push(BlockCache {
                ln1: ln1c,
                attn: attnc,
                x_mid,
                ln2: ln2c,
                fc1: fc1c,
                h_pre,
                fc2: fc2c,
            });
            x = x_next;
        }
        let (xf, final_c) = self.final_ln.forward(rt, &x)?;
        let (logits, head_c) = self.head.forward(rt, &xf)?;
        let (loss, dlogits) = self.cross_entropy_graph(rt, &logits)?;
        Ok(StepCache {
            emb: emb_cache,
            blocks,
            final_ln: final_c,
            head: head_c,
            logits,
            loss,
            dlogits,
        })
    }

    /// Cross-entropy over the vocabulary axis of the logits, batch-mean
    /// reduction. Returns the scalar loss tile and dlogits.
    fn cross_entropy_graph(
        &self,
        rt: &mut Runtime,
        logits: &TiledTensor,
    ) -> Result<(TileHandle, TiledTensor)> {
        let labels = &self.labels;
        let vocab = self.cfg.vocab_size;
        let inv_n = 1.0 / (self.cfg.seq_len * self.cfg.batch_size) as f32;
        let stat_shape = [logits.shape()[1], logits.shape()[2]];
        let stat_tile = [logits.tile_shape()[1], logits.tile_shape()[2]];
        let n_vt = logits.grid()[0];

        let mut maxes = Vec::with_capacity(n_vt);
        let mut sums = Vec::with_capacity(n_vt);
        for _ in 0..n_vt {
            maxes.push(TiledTensor::new(rt, &stat_shape, &stat_tile, Fill::Zeros)?);
            sums.push(TiledTensor::new(rt, &stat_shape, &stat_tile, Fill::Zeros)?);
        }
        for i in 0..n_vt {
            for j in 0..logits.grid()[1] {
                for k in 0..logits.grid()[2] {
                    let hz = logits.handle_at(&[i, j, k]);
                    let hm = maxes[i].handle_at(&[j, k]);
                    let hs = sums[i].handle_at(&[j, k]);
                    let zd = logits.tile_dims(&[i, j, k]);
                    let (rows, cols) = (zd[0], zd[1] * zd[2]);
                    rt.submit(
                        "xent_pass1",
                        (3 * rows * cols) as u64,
                        vec![
                            (hz, AccessMode::Read),
                            (hm, AccessMode::Write),
                            (hs, AccessMode::Write),
                        ],
                        move |ctx| {
                            let z = ctx.read(0);
                            let mv = ctx.write(1);
                            let sv = ctx.write(2);
                            kernels::softmax_pass1(z, rows, cols, mv, sv)
                        },
                    )?;
                }
            }
        }

        let gmax = TiledTensor::new(rt, &stat_shape, &stat_tile, Fill::Zeros)?;
        let gden = TiledTensor::new(rt, &stat_shape, &stat_tile, Fill::Zeros)?;
        for j in 0..gmax.grid()[0] {
            for k in 0..gmax.grid()[1] {
                let mut accesses: Vec<(TileHandle, AccessMode)> = Vec::new();
                for i in 0..n_vt {
                    accesses.push((maxes[i].handle_at(&[j, k]), AccessMode::Read));
                    accesses.push((sums[i].handle_at(&[j, k]), AccessMode::Read));
                }
                let hgm = gmax.handle_at(&[j, k]);
                let hgd = gden.handle_at(&[j, k]);
                accesses.push((hgm, AccessMode::Write));
                accesses.push((hgd, AccessMode::Write));
                let cols = hgm.elems();
                rt.submit(
                    "xent_combine",
                    (2 * n_vt * cols) as u64,
                    accesses,
                    move |ctx| {
                        let mut parts = Vec::with_capacity(n_vt);
                        for i in 0..n_vt {
                            parts.push((ctx.read(2 * i), ctx.read(2 * i + 1)));
                        }
                        let gm = ctx.write(2 * n_vt);
                        let gd = ctx.write(2 * n_vt + 1);
                        kernels::softmax_combine(&parts, gm, gd)
                    },
                )?;
            }
        }

        let loss = rt.register_tile(4, Fill::Zeros)?;
        for j in 0..gmax.grid()[0] {
            for k in 0..gmax.grid()[1] {
                let hgm = gmax.handle_at(&[j, k]);
                let hgd = gden.handle_at(&[j, k]);
                let hl = labels.handle_at(&[j, k]);
                let cols = hgm.elems();
                rt.submit(
                    "xent_lse",
                    (2 * cols) as u64,
                    vec![
                        (hgm, AccessMode::Read),
                        (hgd, AccessMode::Read),
                        (hl, AccessMode::Read),
                        (loss, AccessMode::Reduce),
                    ],
                    move |ctx| {
                        let gm = ctx.read(0);
                        let gd = ctx.read(1);
                        let lv = ctx.read(2);
                        kernels::xent_loss_lse(gm, gd, lv, vocab, inv_n, ctx.write(3))
                    },
                )?;
            }
        }

        let dlogits = TiledTensor::new(rt, logits.shape(), logits.tile_shape(), Fill::Zeros)?;
        for i in 0..n_vt {
            for j in 0..logits.grid()[1] {
                for k in 0..logits.grid()[2] {
                    let hz = logits.handle_at(&[i, j, k]);
                    let hl = labels.handle_at(&[j, k]);
                    let zd = logits.tile_dims(&[i, j, k]);
                    let (rows, cols) = (zd[0], zd[1] * zd[2]);
                    let class_lo = i * logits.tile_shape()[0];
                    rt.submit(
                        "xent_correct",
                        cols as u64,
                        vec![
                            (hz, AccessMode::Read),
                            (hl, AccessMode::Read),
                            (loss, AccessMode::Reduce),
                        ],
                        move |ctx| {
                            let z = ctx.read(0);
                            let lv = ctx.read(1);
                            kernels::xent_loss_correct(z, lv, class_lo, rows, cols, inv_n, ctx.write(2))
                        },
                    )?;
                    let hgm = gmax.handle_at(&[j, k]);
                    let hgd = gden.handle_at(&[j, k]);
                    let hdz = dlogits.handle_at(&[i, j, k]);
                    rt.submit(
                        "xent_dlogits",
                        (4 * rows * cols) as u64,
                        vec![
                            (hz, AccessMode::Read),
                            (hgm, AccessMode::Read),
                            (hgd, AccessMode::Read),
                            (hl, AccessMode::Read),
                            (hdz, AccessMode::Write),
                        ],
                        move |ctx| {
                            let z = ctx.read(0);
                            let gm = ctx.read(1);
                            let gd = ctx.read(2);
                            let lv = ctx.read(3);
                            kernels::xent_dlogits(
                                z,
                                gm,
                                gd,
                                lv,
                                class_lo,
                                rows,
                                cols,
                                inv_n,
                                ctx.write(4),
                            )
                        },
                    )?;
                }
            }
        }
        rt.reduction_commit(loss)?;
        Ok((loss, dlogits))
    }

    fn backward(&self, rt: &mut Runtime, cache: &StepCache) -> Result<()> {
        for (_, p) in self.parameters() {
            zero_tensor(rt, &p.grad)?;
        }
        let dxf = self.head.backward(rt, &cache.head, &cache.dlogits)?;
        let mut dx = self.final_ln.backward(rt, &cache.final_ln, &dxf)?;
        for (blk, bc) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            let dh_act = blk.fc2.backward(rt, &bc.fc2, &dx)?;
            let dh_pre = gelu_backward(rt, &bc.h_pre, &dh_act)?;
            let da2 = blk.fc1.backward(rt, &bc.fc1, &dh_pre)?;
            let dmid_branch = blk.ln2.backward(rt, &bc.ln2, &da2)?;
            let dx_mid = add_tensors(rt, &dx, &dmid_branch)?;
            let dattn = blk.attn.backward(rt, &bc.attn, &dx_mid)?;
            let dx_branch = blk.ln1.backward(rt, &bc.ln1, &dattn)?;
            dx = add_tensors(rt, &dx_mid, &dx_branch)?;
            let _ = &bc.x_mid;
        }
        self.emb.backward(rt, &cache.emb, &dx)?;
        for (_, p) in self.parameters() {
            commit_tensor(rt, &p.grad)?;
        }
        Ok(())
    }

    /// Runs the forward graph only and returns the loss (waits for the
    /// graph to drain).
    pub fn loss_only(&self, rt: &mut Runtime, ids: &[f32], labels: &[f32]) -> Result<f32> {
        self.write_tokens(rt, &self.ids, ids)?;
        self.write_tokens(rt, &self.labels, labels)?;
        let cache = self.forward(rt)?;
        rt.wait_all()?;
        let _ = &cache.logits;
        Ok(rt.read_tile(cache.loss)?[0])
    }

    /// One full training step: forward, loss, backward, optional
    /// optimizer update, barrier, loss readback.
    pub fn train_step(
        &self,
        rt: &mut Runtime,
        ids: &[f32],
        labels: &[f32],
        optimizer: Option<&mut OptimizerState>,
    ) -> Result<f32> {
        self.write_tokens(rt, &self.ids, ids)?;
        self.write_tokens(rt, &self.labels, labels)?;
        let cache = self.forward(rt)?;
        self.backward(rt, &cache)?;
        if let Some(opt) = optimizer {
            opt.step(rt)?;
        }
        rt.wait_all()?;
        Ok(rt.read_tile(cache.loss)?[0])
    }

    /// Copies current parameter values into a dense f64 map keyed by
    /// canonical names (the bridge to the reference implementation).
    pub fn dense_params(&self, rt: &Runtime) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (name, p) in self.parameters() {
            let dense: Vec<f64> = p.value.to_dense(rt)?.iter().map(|&v| v as f64).collect();
            out.insert(name, dense);
        }
        Ok(out)
    }

    /// Committed gradients as dense f64.
    pub fn dense_grads(&self, rt: &Runtime) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (name, p) in self.parameters() {
            let dense: Vec<f64> = p.grad.to_dense(rt)?.iter().map(|&v| v as f64).collect();
            out.insert(name, dense);
        }
        Ok(out)
    }

    /// Serializes all parameter values (checkpoint).
    pub fn save_checkpoint(&self, rt: &Runtime, w: &mut impl Write) -> Result<()> {
        let params = self.parameters();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, p) in params {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            p.value.save(rt, w)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(&self, rt: &mut Runtime, r: &mut impl Read) -> Result<()> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad checkpoint magic".into()));
        }
        let mut count = [0u8; 4];
        r.read_exact(&mut count)?;
        let count = u32::from_le_bytes(count) as usize;
        let params: BTreeMap<String, &TensorGradPair> = self
            .parameters()
            .into_iter()
            .map(|(n, p)| (n, p))
            .collect();
        if count != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {count} tensors, model has {}",
                params.len()
            )));
        }
        for _ in 0..count {
            let mut len = [0u8; 4];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
            let p = params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
            p.value.load(rt, r)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct TrainMetrics {
    pub step: usize,
    pub loss: f32,
    /// Virtual seconds of the step's schedule.
    pub makespan: f64,
    pub wall_seconds: f64,
    pub flops_per_vsec: f64,
    pub bytes_moved: u64,
}

pub struct TrainOutcome {
    pub metrics: Vec<TrainMetrics>,
    pub parameter_count: u64,
}

pub fn train(rt: &mut Runtime, cfg: &GPT2Config, tcfg: &TrainingConfig) -> Result<TrainOutcome> {
    let model = Gpt2Model::build(rt, cfg)?;
    let params = model.parameters();
    let param_refs: Vec<&TensorGradPair> = params.iter().map(|(_, p)| *p).collect();
    let mut optimizer = OptimizerState::new(rt, tcfg.optimizer, &param_refs)?;
    drop(params);
    let dataset = Dataset::new(tcfg.dataset, cfg, tcfg.data_seed, tcfg.n_fixed_sequences);
    let step_flops = cfg.step_flops();

    let mut metrics = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let (ids, labels) = dataset.batch(step);
        let wall_start = std::time::Instant::now();
        let loss = model.train_step(rt, &ids, &labels, Some(&mut optimizer))?;
        if !loss.is_finite() {
            return Err(Error::Config(format!(
                "loss diverged to {loss} at step {step}"
            )));
        }
        let summary = rt.last_summary().expect("train step ran an epoch");
        metrics.push(TrainMetrics {
            step,
            loss,
            makespan: summary.makespan,
            wall_seconds: wall_start.elapsed().as_secs_f64(),
            flops_per_vsec: if summary.makespan > 0.0 {
                step_flops / summary.makespan
            } else {
                0.0
            },
            bytes_moved: summary.bytes_moved,
        });
        rt.retire_completed();
    }
    Ok(TrainOutcome {
        metrics,
        parameter_count: model.parameter_count(),
    })
}

pub fn write_metrics_csv(w: &mut impl Write, metrics: &[TrainMetrics]) -> Result<()> {
    writeln!(w, "step,loss,makespan,flops_per_vsec,bytes_moved")?;
    for m in metrics {
        writeln!(
            w,
            "{},{},{},{},{}",
            m.step, m.loss, m.makespan, m.flops_per_vsec, m.bytes_moved
        )?;
    }
    Ok(())
}

//! Pure per-tile compute kernels: the task bodies. Every function here
//! is a deterministic function of its input slices with no side effects
//! beyond its declared outputs, so any worker may run it.
//!
//! Conventions: tiles are row-major over their own dims. 3D activation
//! tiles are (embed, seq, batch); 4D attention tiles are
//! (head_size, seq, batch, head); score tiles are (key, query, batch,
//! head). Reduce-mode outputs arrive zero-initialized and are merged by
//! addition at the commit point, so kernels accumulate with `+=`.

use crate::error::{Error, Result};

/// Value used to mask forbidden attention scores. Finite on purpose:
/// the two-pass softmax exponentiates `x - max`, and a -inf tile max
/// would turn fully-masked tiles into NaNs.
pub const MASK_VALUE: f32 = -1.0e30;

// ---------------------------------------------------------------------------
// General matrix multiply
// ---------------------------------------------------------------------------

/// C := alpha * op(A) op(B) + beta * C, where op(A) is m x k and op(B)
/// is k x n. Cost hint: `2 m k n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    beta: f32,
    trans_a: bool,
    trans_b: bool,
) -> Result<()> {
    if a.len() != m * k || b.len() != k * n || c.len() != m * n {
        return Err(Error::ShapeMismatch(format!(
            "gemm {m}x{k}x{n}: got a={}, b={}, c={}",
            a.len(),
            b.len(),
            c.len()
        )));
    }
    let at = |i: usize, l: usize| if trans_a { a[l * m + i] } else { a[i * k + l] };
    let bt = |l: usize, j: usize| if trans_b { b[j * k + l] } else { b[l * n + j] };
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for l in 0..k {
                acc += at(i, l) * bt(l, j);
            }
            c[i * n + j] = alpha * acc + beta * c[i * n + j];
        }
    }
    Ok(())
}

pub fn gemm_cost(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}

// ---------------------------------------------------------------------------
// Bias / elementwise helpers
// ---------------------------------------------------------------------------

/// y[i, j] += bias[i] for a (d, cols) tile.
pub fn bias_add(y: &mut [f32], bias: &[f32], d: usize, cols: usize) -> Result<()> {
    if y.len() != d * cols || bias.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "bias_add d={d} cols={cols}: got y={}, bias={}",
            y.len(),
            bias.len()
        )));
    }
    for i in 0..d {
        for j in 0..cols {
            y[i * cols + j] += bias[i];
        }
    }
    Ok(())
}

/// out[i, j] = bias[i]: broadcast initialization of a (d, cols) tile.
pub fn bias_broadcast(out: &mut [f32], bias: &[f32], d: usize, cols: usize) -> Result<()> {
    if out.len() != d * cols || bias.len() != d {
        return Err(Error::ShapeMismatch("bias_broadcast dims".into()));
    }
    for i in 0..d {
        out[i * cols..(i + 1) * cols].fill(bias[i]);
    }
    Ok(())
}

/// out += a (elementwise); shapes must agree.
pub fn add_assign(out: &mut [f32], a: &[f32]) -> Result<()> {
    if out.len() != a.len() {
        return Err(Error::ShapeMismatch("add_assign length".into()));
    }
    for (o, x) in out.iter_mut().zip(a) {
        *o += x;
    }
    Ok(())
}

/// out = a + b (elementwise).
pub fn add(a: &[f32], b: &[f32], out: &mut [f32]) -> Result<()> {
    if a.len() != b.len() || a.len() != out.len() {
        return Err(Error::ShapeMismatch("add length".into()));
    }
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x + y;
    }
    Ok(())
}

/// out[d] += sum_j y[d, j]: row sums of a (d, cols) tile.
pub fn row_sum(y: &[f32], out: &mut [f32], d: usize, cols: usize) -> Result<()> {
    if y.len() != d * cols || out.len() != d {
        return Err(Error::ShapeMismatch("row_sum dims".into()));
    }
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..cols {
            acc += y[i * cols + j];
        }
        out[i] += acc;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)
// ---------------------------------------------------------------------------

const GELU_C: f32 = 0.797_884_56; // sqrt(2 / pi)
const GELU_A: f32 = 0.044_715;

pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu_forward(x: &[f32], y: &mut [f32]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch("gelu length".into()));
    }
    for (o, &v) in y.iter_mut().zip(x) {
        *o = gelu_scalar(v);
    }
    Ok(())
}

/// dx += dy * gelu'(x).
pub fn gelu_backward(x: &[f32], dy: &[f32], dx: &mut [f32]) -> Result<()> {
    if x.len() != dy.len() || x.len() != dx.len() {
        return Err(Error::ShapeMismatch("gelu_backward length".into()));
    }
    for i in 0..x.len() {
        dx[i] += dy[i] * gelu_grad_scalar(x[i]);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Layer normalization (normalize over the embedding axis)
// ---------------------------------------------------------------------------

/// Accumulates per-column sums and squared sums of a (rows, cols) tile.
pub fn norm_stats(
    x: &[f32],
    rows: usize,
    cols: usize,
    sum: &mut [f32],
    sum_sq: &mut [f32],
) -> Result<()> {
    if x.len() != rows * cols || sum.len() != cols || sum_sq.len() != cols {
        return Err(Error::ShapeMismatch("norm_stats dims".into()));
    }
    for i in 0..rows {
        for j in 0..cols {
            let v = x[i * cols + j];
            sum[j] += v;
            sum_sq[j] += v * v;
        }
    }
    Ok(())
}

/// mean = sum / n; inv_std = 1 / sqrt(var + eps), with the variance from
/// the accumulated first and second moments.
pub fn norm_finalize(
    sum: &[f32],
    sum_sq: &[f32],
    n: usize,
    eps: f32,
    mean: &mut [f32],
    inv_std: &mut [f32],
) -> Result<()> {
    if sum.len() != sum_sq.len() || sum.len() != mean.len() || sum.len() != inv_std.len() {
        return Err(Error::ShapeMismatch("norm_finalize dims".into()));
    }
    let inv_n = 1.0 / n as f32;
    for j in 0..sum.len() {
        let m = sum[j] * inv_n;
        let var = (sum_sq[j] * inv_n - m * m).max(0.0);
        mean[j] = m;
        inv_std[j] = 1.0 / (var + eps).sqrt();
    }
    Ok(())
}

/// sum[j] += sum_i x[i, j]: the mean pass of the stable two-pass
/// moment computation.
pub fn col_sum(x: &[f32], rows: usize, cols: usize, sum: &mut [f32]) -> Result<()> {
    if x.len() != rows * cols || sum.len() != cols {
        return Err(Error::ShapeMismatch("col_sum dims".into()));
    }
    for i in 0..rows {
        for j in 0..cols {
            sum[j] += x[i * cols + j];
        }
    }
    Ok(())
}

/// mean[j] = sum[j] / n.
pub fn col_mean(sum: &[f32], n: usize, mean: &mut [f32]) -> Result<()> {
    if sum.len() != mean.len() {
        return Err(Error::ShapeMismatch("col_mean dims".into()));
    }
    let inv_n = 1.0 / n as f32;
    for (m, s) in mean.iter_mut().zip(sum) {
        *m = s * inv_n;
    }
    Ok(())
}

/// ss[j] += sum_i (x[i, j] - mean[j])^2: the centered variance pass,
/// free of the cancellation the raw second moment suffers.
pub fn centered_sum_sq(
    x: &[f32],
    mean: &[f32],
    rows: usize,
    cols: usize,
    ss: &mut [f32],
) -> Result<()> {
    if x.len() != rows * cols || mean.len() != cols || ss.len() != cols {
        return Err(Error::ShapeMismatch("centered_sum_sq dims".into()));
    }
    for i in 0..rows {
        for j in 0..cols {
            let d = x[i * cols + j] - mean[j];
            ss[j] += d * d;
        }
    }
    Ok(())
}

/// inv_std[j] = 1 / sqrt(ss[j] / n + eps).
pub fn inv_std_from_ss(ss: &[f32], n: usize, eps: f32, inv_std: &mut [f32]) -> Result<()> {
    if ss.len() != inv_std.len() {
        return Err(Error::ShapeMismatch("inv_std_from_ss dims".into()));
    }
    let inv_n = 1.0 / n as f32;
    for (o, s) in inv_std.iter_mut().zip(ss) {
        *o = 1.0 / (s * inv_n + eps).sqrt();
    }
    Ok(())
}

/// xhat[i, j] = (x[i, j] - mean[j]) * inv_std[j].
pub fn normalize(
    x: &[f32],
    mean: &[f32],
    inv_std: &[f32],
    rows: usize,
    cols: usize,
    xhat: &mut [f32],
) -> Result<()> {
    if x.len() != rows * cols
        || mean.len() != cols
        || inv_std.len() != cols
        || xhat.len() != x.len()
    {
        return Err(Error::ShapeMismatch("normalize dims".into()));
    }
    for i in 0..rows {
        for j in 0..cols {
            xhat[i * cols + j] = (x[i * cols + j] - mean[j]) * inv_std[j];
        }
    }
    Ok(())
}

/// y[i, j] = gamma[i] * xhat[i, j] + beta[i].
pub fn scale_shift(
    xhat: &[f32],
    gamma: &[f32],
    beta: &[f32],
    rows: usize,
    cols: usize,
    y: &mut [f32],
) -> Result<()> {
    if xhat.len() != rows * cols
        || gamma.len() != rows
        || beta.len() != rows
        || y.len() != xhat.len()
    {
        return Err(Error::ShapeMismatch("scale_shift dims".into()));
    }
    for i in 0..rows {
        for j in 0..cols {
            y[i * cols + j] = gamma[i] * xhat[i * cols + j] + beta[i];
        }
    }
    Ok(())
}

/// Accumulates the two per-column contractions the layernorm input
/// gradient needs: a[j] += sum_i dy*gamma, c[j] += sum_i dy*gamma*xhat.
pub fn ln_bwd_stats(
    dy: &[f32],
    gamma: &[f32],
    xhat: &[f32],
    rows: usize,
    cols: usize,
    a: &mut [f32],
    c: &mut [f32],
) -> Result<()> {
    if dy.len() != rows * cols || gamma.len() != rows || xhat.len() != dy.len() {
        return Err(Error::ShapeMismatch("ln_bwd_stats dims".into()));
    }
    for i in 0..rows {
        for j in 0..cols {
            let dxh = dy[i * cols + j] * gamma[i];
            a[j] += dxh;
            c[j] += dxh * xhat[i * cols + j];
        }
    }
    Ok(())
}

/// dx += inv_std[j] * (dy*gamma - a[j]/n - xhat * c[j]/n).
#[allow(clippy::too_many_arguments)]
pub fn ln_bwd_apply(
    dy: &[f32],
    gamma: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    a: &[f32],
    c: &[f32],
    n: usize,
    rows: usize,
    cols: usize,
    dx: &mut [f32],
) -> Result<()> {
    if dy.len() != rows * cols || dx.len() != dy.len() {
        return Err(Error::ShapeMismatch("ln_bwd_apply dims".into()));
    }
    let inv_n = 1.0 / n as f32;
    for i in 0..rows {
        for j in 0..cols {
            let idx = i * cols + j;
            let dxh = dy[idx] * gamma[i];
            dx[idx] += inv_std[j] * (dxh - a[j] * inv_n - xhat[idx] * c[j] * inv_n);
        }
    }
    Ok(())
}

/// dgamma[i] += sum_j dy*xhat; dbeta[i] += sum_j dy.
pub fn ln_dgamma_dbeta(
    dy: &[f32],
    xhat: &[f32],
    rows: usize,
    cols: usize,
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Result<()> {
    if dy.len() != rows * cols || dgamma.len() != rows || dbeta.len() != rows {
        return Err(Error::ShapeMismatch("ln_dgamma_dbeta dims".into()));
    }
    for i in 0..rows {
        let mut dg = 0.0;
        let mut db = 0.0;
        for j in 0..cols {
            dg += dy[i * cols + j] * xhat[i * cols + j];
            db += dy[i * cols + j];
        }
        dgamma[i] += dg;
        dbeta[i] += db;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Two-pass softmax over axis 0 of a (rows, cols) tile
// ---------------------------------------------------------------------------

/// First pass: per-column tile max and sum of exponentials relative to
/// that max.
pub fn softmax_pass1(
    x: &[f32],
    rows: usize,
    cols: usize,
    tile_max: &mut [f32],
    tile_sumexp: &mut [f32],
) -> Result<()> {
    if x.len() != rows * cols || tile_max.len() != cols || tile_sumexp.len() != cols {
        return Err(Error::ShapeMismatch("softmax_pass1 dims".into()));
    }
    for j in 0..cols {
        let mut m = f32::NEG_INFINITY;
        for i in 0..rows {
            m = m.max(x[i * cols + j]);
        }
        let mut z = 0.0;
        for i in 0..rows {
            z += (x[i * cols + j] - m).exp();
        }
        tile_max[j] = m;
        tile_sumexp[j] = z;
    }
    Ok(())
}

/// Aggregation: global max is the max of tile maxes, and each tile's
/// denominator is rescaled to it.
pub fn softmax_combine(
    parts: &[(&[f32], &[f32])],
    global_max: &mut [f32],
    global_denom: &mut [f32],
) -> Result<()> {
    let cols = global_max.len();
    if global_denom.len() != cols || parts.iter().any(|(m, z)| m.len() != cols || z.len() != cols)
    {
        return Err(Error::ShapeMismatch("softmax_combine dims".into()));
    }
    for j in 0..cols {
        let mut m = f32::NEG_INFINITY;
        for (tm, _) in parts {
            m = m.max(tm[j]);
        }
        let mut z = 0.0;
        for (tm, tz) in parts {
            z += tz[j] * (tm[j] - m).exp();
        }
        global_max[j] = m;
        global_denom[j] = z;
    }
    Ok(())
}

/// Second pass: probabilities against the aggregated max/denominator.
pub fn softmax_pass2(
    x: &[f32],
    rows: usize,
    cols: usize,
    global_max: &[f32],
    global_denom: &[f32],
    p: &mut [f32],
) -> Result<()> {
    if x.len() != rows * cols || global_max.len() != cols || global_denom.len() != cols {
        return Err(Error::ShapeMismatch("softmax_pass2 dims".into()));
    }
    for i in 0..rows {
        for j in 0..cols {
            p[i * cols + j] = (x[i * cols + j] - global_max[j]).exp() / global_denom[j];
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Embedding gather / scatter
// ---------------------------------------------------------------------------

/// out[e, s, b] = table[ids[s, b], e] over an embedding-column tile.
/// `table` is the (vocab, e_width) slab for this embedding range; ids
/// are token indices stored as f32.
pub fn embedding_gather(
    table: &[f32],
    ids: &[f32],
    out: &mut [f32],
    vocab: usize,
    e_width: usize,
    cols: usize,
) -> Result<()> {
    if table.len() != vocab * e_width || ids.len() != cols || out.len() != e_width * cols {
        return Err(Error::ShapeMismatch("embedding_gather dims".into()));
    }
    for (j, &idf) in ids.iter().enumerate() {
        let id = idf as isize;
        if id < 0 || id as usize >= vocab {
            return Err(Error::ShapeMismatch(format!(
                "token id {id} out of range 0..{vocab}"
            )));
        }
        let row = &table[(id as usize) * e_width..(id as usize + 1) * e_width];
        for e in 0..e_width {
            out[e * cols + j] = row[e];
        }
    }
    Ok(())
}

/// dtable[ids[s, b], e] += dx[e, s, b]; the accumulation side of gather.
pub fn embedding_scatter_add(
    dtable: &mut [f32],
    ids: &[f32],
    dx: &[f32],
    vocab: usize,
    e_width: usize,
    cols: usize,
) -> Result<()> {
    if dtable.len() != vocab * e_width || ids.len() != cols || dx.len() != e_width * cols {
        return Err(Error::ShapeMismatch("embedding_scatter_add dims".into()));
    }
    for (j, &idf) in ids.iter().enumerate() {
        let id = idf as isize;
        if id < 0 || id as usize >= vocab {
            return Err(Error::ShapeMismatch(format!(
                "token id {id} out of range 0..{vocab}"
            )));
        }
        for e in 0..e_width {
            dtable[(id as usize) * e_width + e] += dx[e * cols + j];
        }
    }
    Ok(())
}

/// x[e, s, b] += p[e, s]: learned positional embeddings broadcast over
/// the batch axis. Tile dims (e_rows, s_cols, b_cols).
pub fn pos_add(
    x: &mut [f32],
    p: &[f32],
    e_rows: usize,
    s_cols: usize,
    b_cols: usize,
) -> Result<()> {
    if x.len() != e_rows * s_cols * b_cols || p.len() != e_rows * s_cols {
        return Err(Error::ShapeMismatch("pos_add dims".into()));
    }
    for e in 0..e_rows {
        for s in 0..s_cols {
            let pv = p[e * s_cols + s];
            for b in 0..b_cols {
                x[(e * s_cols + s) * b_cols + b] += pv;
            }
        }
    }
    Ok(())
}

/// dp[e, s] += sum_b dx[e, s, b].
pub fn pos_grad(
    dx: &[f32],
    dp: &mut [f32],
    e_rows: usize,
    s_cols: usize,
    b_cols: usize,
) -> Result<()> {
    if dx.len() != e_rows * s_cols * b_cols || dp.len() != e_rows * s_cols {
        return Err(Error::ShapeMismatch("pos_grad dims".into()));
    }
    for e in 0..e_rows {
        for s in 0..s_cols {
            let mut acc = 0.0;
            for b in 0..b_cols {
                acc += dx[(e * s_cols + s) * b_cols + b];
            }
            dp[e * s_cols + s] += acc;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Cross-entropy over the class axis (axis 0 of logits)
// ---------------------------------------------------------------------------

/// Adds the log-sum-exp part of the loss for every sample in this
/// column tile, scaled by `inv_n` (batch-mean reduction). Labels are
/// validated here, once per sample.
pub fn xent_loss_lse(
    global_max: &[f32],
    global_denom: &[f32],
    labels: &[f32],
    n_classes: usize,
    inv_n: f32,
    loss: &mut [f32],
) -> Result<()> {
    if global_max.len() != labels.len() || global_denom.len() != labels.len() || loss.len() != 1 {
        return Err(Error::ShapeMismatch("xent_loss_lse dims".into()));
    }
    let mut acc = 0.0;
    for (j, &lf) in labels.iter().enumerate() {
        let label = lf as isize;
        if label < 0 || label as usize >= n_classes {
            return Err(Error::ShapeMismatch(format!(
                "label {label} out of range 0..{n_classes}"
            )));
        }
        acc += global_max[j] + global_denom[j].ln();
    }
    loss[0] += acc * inv_n;
    Ok(())
}

/// Subtracts the correct-class logit for samples whose label falls in
/// this class-range tile: loss -= z[label - class_lo, j] * inv_n.
pub fn xent_loss_correct(
    z: &[f32],
    labels: &[f32],
    class_lo: usize,
    class_rows: usize,
    cols: usize,
    inv_n: f32,
    loss: &mut [f32],
) -> Result<()> {
    if z.len() != class_rows * cols || labels.len() != cols || loss.len() != 1 {
        return Err(Error::ShapeMismatch("xent_loss_correct dims".into()));
    }
    let mut acc = 0.0;
    for (j, &lf) in labels.iter().enumerate() {
        let label = lf as usize;
        if label >= class_lo && label < class_lo + class_rows {
            acc -= z[(label - class_lo) * cols + j];
        }
    }
    loss[0] += acc * inv_n;
    Ok(())
}

/// dz[c, j] = (softmax(z)[c, j] - onehot) * inv_n for this class range.
#[allow(clippy::too_many_arguments)]
pub fn xent_dlogits(
    z: &[f32],
    global_max: &[f32],
    global_denom: &[f32],
    labels: &[f32],
    class_lo: usize,
    class_rows: usize,
    cols: usize,
    inv_n: f32,
    dz: &mut [f32],
) -> Result<()> {
    if z.len() != class_rows * cols || dz.len() != z.len() || labels.len() != cols {
        return Err(Error::ShapeMismatch("xent_dlogits dims".into()));
    }
    for c in 0..class_rows {
        for j in 0..cols {
            let p = (z[c * cols + j] - global_max[j]).exp() / global_denom[j];
            let hit = labels[j] as usize == class_lo + c;
            dz[c * cols + j] = (p - if hit { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Optimizer update rules (tile-wise)
// ---------------------------------------------------------------------------

/// m = mu * m + g; w -= lr * m.
pub fn sgd_momentum_update(
    w: &mut [f32],
    g: &[f32],
    m: &mut [f32],
    lr: f32,
    mu: f32,
) -> Result<()> {
    if w.len() != g.len() || w.len() != m.len() {
        return Err(Error::ShapeMismatch("sgd_momentum_update dims".into()));
    }
    for i in 0..w.len() {
        m[i] = mu * m[i] + g[i];
        w[i] -= lr * m[i];
    }
    Ok(())
}

/// Bias-corrected Adam with optional decoupled weight decay (AdamW).
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    w: &mut [f32],
    g: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    t: u64,
) -> Result<()> {
    if w.len() != g.len() || w.len() != m.len() || w.len() != v.len() {
        return Err(Error::ShapeMismatch("adam_update dims".into()));
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..w.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        if weight_decay != 0.0 {
            w[i] -= lr * weight_decay * w[i];
        }
        w[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Attention-specific 4D tile kernels
// ---------------------------------------------------------------------------
//
// Index maps for the shapes involved:
//   q/k/v/b tiles  (C, S, B, H): ((c*S + s)*B + b)*H + h
//   score tiles    (Sk, Sq, B, H): ((i*Sq + j)*B + b)*H + h
//   activation     (E, S, B): (e*S + s)*B + b
//   w_qkv tiles    (C, H, E): (c*H + h)*E + e
//   w_out tiles    (E, H, C): (e*H + h)*C + c

/// Dims of one 4D projection tile.
#[derive(Clone, Copy, Debug)]
pub struct ProjDims {
    pub c: usize,
    pub s: usize,
    pub b: usize,
    pub h: usize,
    pub e: usize,
}

/// q[c, s, b, h] += sum_e w[c, h, e] * x[e, s, b].
pub fn attn_proj(w: &[f32], x: &[f32], q: &mut [f32], d: ProjDims) -> Result<()> {
    let ProjDims { c, s, b, h, e } = d;
    if w.len() != c * h * e || x.len() != e * s * b || q.len() != c * s * b * h {
        return Err(Error::ShapeMismatch("attn_proj dims".into()));
    }
    for ci in 0..c {
        for hi in 0..h {
            let wrow = &w[(ci * h + hi) * e..(ci * h + hi + 1) * e];
            for si in 0..s {
                for bi in 0..b {
                    let mut acc = 0.0;
                    for ei in 0..e {
                        acc += wrow[ei] * x[(ei * s + si) * b + bi];
                    }
                    q[((ci * s + si) * b + bi) * h + hi] += acc;
                }
            }
        }
    }
    Ok(())
}

/// out[c, s, b, h] = bias[c, h]: broadcast of a (C, H) projection bias.
pub fn attn_bias_broadcast(
    bias: &[f32],
    out: &mut [f32],
    c: usize,
    s: usize,
    b: usize,
    h: usize,
) -> Result<()> {
    if bias.len() != c * h || out.len() != c * s * b * h {
        return Err(Error::ShapeMismatch("attn_bias_broadcast dims".into()));
    }
    for ci in 0..c {
        for si in 0..s {
            for bi in 0..b {
                for hi in 0..h {
                    out[((ci * s + si) * b + bi) * h + hi] = bias[ci * h + hi];
                }
            }
        }
    }
    Ok(())
}

/// dw[c, h, e] += sum_{s,b} dq[c, s, b, h] * x[e, s, b].
pub fn attn_proj_dw(dq: &[f32], x: &[f32], dw: &mut [f32], d: ProjDims) -> Result<()> {
    let ProjDims { c, s, b, h, e } = d;
    if dq.len() != c * s * b * h || x.len() != e * s * b || dw.len() != c * h * e {
        return Err(Error::ShapeMismatch("attn_proj_dw dims".into()));
    }
    for ci in 0..c {
        for hi in 0..h {
            for ei in 0..e {
                let mut acc = 0.0;
                for si in 0..s {
                    for bi in 0..b {
                        acc += dq[((ci * s + si) * b + bi) * h + hi] * x[(ei * s + si) * b + bi];
                    }
                }
                dw[(ci * h + hi) * e + ei] += acc;
            }
        }
    }
    Ok(())
}

/// db[c, h] += sum_{s,b} dq[c, s, b, h].
pub fn attn_proj_db(
    dq: &[f32],
    db: &mut [f32],
    c: usize,
    s: usize,
    b: usize,
    h: usize,
) -> Result<()> {
    if dq.len() != c * s * b * h || db.len() != c * h {
        return Err(Error::ShapeMismatch("attn_proj_db dims".into()));
    }
    for ci in 0..c {
        for hi in 0..h {
            let mut acc = 0.0;
            for si in 0..s {
                for bi in 0..b {
                    acc += dq[((ci * s + si) * b + bi) * h + hi];
                }
            }
            db[ci * h + hi] += acc;
        }
    }
    Ok(())
}

/// dx[e, s, b] += sum_{c,h} w[c, h, e] * dq[c, s, b, h].
pub fn attn_proj_dx(w: &[f32], dq: &[f32], dx: &mut [f32], d: ProjDims) -> Result<()> {
    let ProjDims { c, s, b, h, e } = d;
    if w.len() != c * h * e || dq.len() != c * s * b * h || dx.len() != e * s * b {
        return Err(Error::ShapeMismatch("attn_proj_dx dims".into()));
    }
    for ei in 0..e {
        for si in 0..s {
            for bi in 0..b {
                let mut acc = 0.0;
                for ci in 0..c {
                    for hi in 0..h {
                        acc += w[(ci * h + hi) * e + ei] * dq[((ci * s + si) * b + bi) * h + hi];
                    }
                }
                dx[(ei * s + si) * b + bi] += acc;
            }
        }
    }
    Ok(())
}

/// Dims of one score tile computation.
#[derive(Clone, Copy, Debug)]
pub struct ScoreDims {
    /// Head size (contraction length).
    pub c: usize,
    /// Key rows in this tile and their global offset.
    pub sk: usize,
    pub key_lo: usize,
    /// Query columns in this tile and their global offset.
    pub sq: usize,
    pub query_lo: usize,
    pub b: usize,
    pub h: usize,
}

/// scores[i, j, b, h] = scale * sum_c k[c, i, b, h] * q[c, j, b, h],
/// with causally masked positions set to [`MASK_VALUE`].
pub fn attn_scores(
    k: &[f32],
    q: &[f32],
    scores: &mut [f32],
    d: ScoreDims,
    scale: f32,
    causal: bool,
) -> Result<()> {
    let ScoreDims {
        c,
        sk,
        key_lo,
        sq,
        query_lo,
        b,
        h,
    } = d;
    if k.len() != c * sk * b * h || q.len() != c * sq * b * h || scores.len() != sk * sq * b * h {
        return Err(Error::ShapeMismatch("attn_scores dims".into()));
    }
    for i in 0..sk {
        for j in 0..sq {
            let masked = causal && key_lo + i > query_lo + j;
            for bi in 0..b {
                for hi in 0..h {
                    let out = &mut scores[((i * sq + j) * b + bi) * h + hi];
                    if masked {
                        *out = MASK_VALUE;
                        continue;
                    }
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += k[((ci * sk + i) * b + bi) * h + hi]
                            * q[((ci * sq + j) * b + bi) * h + hi];
                    }
                    *out = scale * acc;
                }
            }
        }
    }
    Ok(())
}

/// out[c, j, b, h] += sum_i v[c, i, b, h] * p[i, j, b, h].
pub fn attn_apply(
    v: &[f32],
    p: &[f32],
    out: &mut [f32],
    c: usize,
    sk: usize,
    sq: usize,
    b: usize,
    h: usize,
) -> Result<()> {
    if v.len() != c * sk * b * h || p.len() != sk * sq * b * h || out.len() != c * sq * b * h {
        return Err(Error::ShapeMismatch("attn_apply dims".into()));
    }
    for ci in 0..c {
        for j in 0..sq {
            for bi in 0..b {
                for hi in 0..h {
                    let mut acc = 0.0;
                    for i in 0..sk {
                        acc += v[((ci * sk + i) * b + bi) * h + hi]
                            * p[((i * sq + j) * b + bi) * h + hi];
                    }
                    out[((ci * sq + j) * b + bi) * h + hi] += acc;
                }
            }
        }
    }
    Ok(())
}

/// dp[i, j, b, h] = sum_c v[c, i, b, h] * db4[c, j, b, h].
pub fn attn_dp(
    v: &[f32],
    db4: &[f32],
    dp: &mut [f32],
    c: usize,
    sk: usize,
    sq: usize,
    b: usize,
    h: usize,
) -> Result<()> {
    if v.len() != c * sk * b * h || db4.len() != c * sq * b * h || dp.len() != sk * sq * b * h {
        return Err(Error::ShapeMismatch("attn_dp dims".into()));
    }
    for i in 0..sk {
        for j in 0..sq {
            for bi in 0..b {
                for hi in 0..h {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += v[((ci * sk + i) * b + bi) * h + hi]
                            * db4[((ci * sq + j) * b + bi) * h + hi];
                    }
                    dp[((i * sq + j) * b + bi) * h + hi] = acc;
                }
            }
        }
    }
    Ok(())
}

/// dv[c, i, b, h] += sum_j p[i, j, b, h] * db4[c, j, b, h].
pub fn attn_dv(
    p: &[f32],
    db4: &[f32],
    dv: &mut [f32],
    c: usize,
    sk: usize,
    sq: usize,
    b: usize,
    h: usize,
) -> Result<()> {
    if p.len() != sk * sq * b * h || db4.len() != c * sq * b * h || dv.len() != c * sk * b * h {
        return Err(Error::ShapeMismatch("attn_dv dims".into()));
    }
    for ci in 0..c {
        for i in 0..sk {
            for bi in 0..b {
                for hi in 0..h {
                    let mut acc = 0.0;
                    for j in 0..sq {
                        acc += p[((i * sq + j) * b + bi) * h + hi]
                            * db4[((ci * sq + j) * b + bi) * h + hi];
                    }
                    dv[((ci * sk + i) * b + bi) * h + hi] += acc;
                }
            }
        }
    }
    Ok(())
}

/// t[j, b, h] += sum_i p[i, j, b, h] * dp[i, j, b, h]: the softmax
/// backward dot product, accumulated over key tiles.
pub fn softmax_bwd_dot(
    p: &[f32],
    dp: &[f32],
    t: &mut [f32],
    sk: usize,
    sq: usize,
    b: usize,
    h: usize,
) -> Result<()> {
    if p.len() != sk * sq * b * h || dp.len() != p.len() || t.len() != sq * b * h {
        return Err(Error::ShapeMismatch("softmax_bwd_dot dims".into()));
    }
    for i in 0..sk {
        for j in 0..sq {
            for bi in 0..b {
                for hi in 0..h {
                    let idx = ((i * sq + j) * b + bi) * h + hi;
                    t[(j * b + bi) * h + hi] += p[idx] * dp[idx];
                }
            }
        }
    }
    Ok(())
}

/// ds[i, j, b, h] = p * (dp - t[j, b, h]).
pub fn softmax_bwd_apply(
    p: &[f32],
    dp: &[f32],
    t: &[f32],
    ds: &mut [f32],
    sk: usize,
    sq: usize,
    b: usize,
    h: usize,
) -> Result<()> {
    if p.len() != sk * sq * b * h
        || dp.len() != p.len()
        || ds.len() != p.len()
        || t.len() != sq * b * h
    {
        return Err(Error::ShapeMismatch("softmax_bwd_apply dims".into()));
    }
    for i in 0..sk {
        for j in 0..sq {
            for bi in 0..b {
                for hi in 0..h {
                    let idx = ((i * sq + j) * b + bi) * h + hi;
                    ds[idx] = p[idx] * (dp[idx] - t[(j * b + bi) * h + hi]);
                }
            }
        }
    }
    Ok(())
}

/// dq[c, j, b, h] += scale * sum_i k[c, i, b, h] * ds[i, j, b, h].
#[allow(clippy::too_many_arguments)]
pub fn attn_dq(
    k: &[f32],
    ds: &[f32],
    dq: &mut [f32],
    c: usize,
    sk: usize,
    sq: usize,
    b: usize,
    h: usize,
    scale: f32,
) -> Result<()> {
    if k.len() != c * sk * b * h || ds.len() != sk * sq * b * h || dq.len() != c * sq * b * h {
        return Err(Error::ShapeMismatch("attn_dq dims".into()));
    }
    for ci in 0..c {
        for j in 0..sq {
            for bi in 0..b {
                for hi in 0..h {
                    let mut acc = 0.0;
                    for i in 0..sk {
                        acc += k[((ci * sk + i) * b + bi) * h + hi]
                            * ds[((i * sq + j) * b + bi) * h + hi];
                    }
                    dq[((ci * sq + j) * b + bi) * h + hi] += scale * acc;
                }
            }
        }
    }
    Ok(())
}

/// dk[c, i, b, h] += scale * sum_j q[c, j, b, h] * ds[i, j, b, h].
#[allow(clippy::too_many_arguments)]
pub fn attn_dk(
    q: &[f32],
    ds: &[f32],
    dk: &mut [f32],
    c: usize,
    sk: usize,
    sq: usize,
    b: usize,
    h: usize,
    scale: f32,
) -> Result<()> {
    if q.len() != c * sq * b * h || ds.len() != sk * sq * b * h || dk.len() != c * sk * b * h {
        return Err(Error::ShapeMismatch("attn_dk dims".into()));
    }
    for ci in 0..c {
        for i in 0..sk {
            for bi in 0..b {
                for hi in 0..h {
                    let mut acc = 0.0;
                    for j in 0..sq {
                        acc += q[((ci * sq + j) * b + bi) * h + hi]
                            * ds[((i * sq + j) * b + bi) * h + hi];
                    }
                    dk[((ci * sk + i) * b + bi) * h + hi] += scale * acc;
                }
            }
        }
    }
    Ok(())
}

/// Dims of the output-projection tile kernels.
#[derive(Clone, Copy, Debug)]
pub struct OutProjDims {
    pub e: usize,
    pub c: usize,
    pub s: usize,
    pub b: usize,
    pub h: usize,
}

/// y[e, s, b] += sum_{h,c} w[e, h, c] * b4[c, s, b, h].
pub fn attn_out(w: &[f32], b4: &[f32], y: &mut [f32], d: OutProjDims) -> Result<()> {
    let OutProjDims { e, c, s, b, h } = d;
    if w.len() != e * h * c || b4.len() != c * s * b * h || y.len() != e * s * b {
        return Err(Error::ShapeMismatch("attn_out dims".into()));
    }
    for ei in 0..e {
        for si in 0..s {
            for bi in 0..b {
                let mut acc = 0.0;
                for hi in 0..h {
                    for ci in 0..c {
                        acc += w[(ei * h + hi) * c + ci] * b4[((ci * s + si) * b + bi) * h + hi];
                    }
                }
                y[(ei * s + si) * b + bi] += acc;
            }
        }
    }
    Ok(())
}

/// dw[e, h, c] += sum_{s,b} dy[e, s, b] * b4[c, s, b, h].
pub fn attn_out_dw(dy: &[f32], b4: &[f32], dw: &mut [f32], d: OutProjDims) -> Result<()> {
    let OutProjDims { e, c, s, b, h } = d;
    if dy.len() != e * s * b || b4.len() != c * s * b * h || dw.len() != e * h * c {
        return Err(Error::ShapeMismatch("attn_out_dw dims".into()));
    }
    for ei in 0..e {
        for hi in 0..h {
            for ci in 0..c {
                let mut acc = 0.0;
                for si in 0..s {
                    for bi in 0..b {
                        acc += dy[(ei * s + si) * b + bi] * b4[((ci * s + si) * b + bi) * h + hi];
                    }
                }
                dw[(ei * h + hi) * c + ci] += acc;
            }
        }
    }
    Ok(())
}

/// db4[c, s, b, h] += sum_e w[e, h, c] * dy[e, s, b].
pub fn attn_out_dx(w: &[f32], dy: &[f32], db4: &mut [f32], d: OutProjDims) -> Result<()> {
    let OutProjDims { e, c, s, b, h } = d;
    if w.len() != e * h * c || dy.len() != e * s * b || db4.len() != c * s * b * h {
        return Err(Error::ShapeMismatch("attn_out_dx dims".into()));
    }
    for ci in 0..c {
        for si in 0..s {
            for bi in 0..b {
                for hi in 0..h {
                    let mut acc = 0.0;
                    for ei in 0..e {
                        acc += w[(ei * h + hi) * c + ci] * dy[(ei * s + si) * b + bi];
                    }
                    db4[((ci * s + si) * b + bi) * h + hi] += acc;
                }
            }
        }
    }
    Ok(())
}

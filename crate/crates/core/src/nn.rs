//! Building blocks: layer normalization, the linear frontend, feed-forward
//! networks, multi-head attention (MA) and multi-head co-attention (MCA).
//!
//! Activations are feature-by-frame matrices:
//! a `D×T` matrix holds one `D`-dimensional embedding per frame. Multi-channel
//! activations are packed channel-major into one `D × (C·T)` matrix, channel
//! `c` occupying columns `c·T .. (c+1)·T`.
//!
//! Per-head projections `W_Q⁽ⁱ⁾` are stored stacked: rows
//! `i·d_k/h .. (i+1)·d_k/h` of `w_q` belong to head `i`.

use crate::error::{shape_err, Result};
use crate::params::{Binding, Init, ParamSpec};
use crate::tape::{Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Key used to count attention-weight evaluations on a tape.
pub const ATTENTION_WEIGHTS_COUNTER: &str = "attention_weights";

fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(join(prefix, "gamma"), &[dim], Init::Ones),
            ParamSpec::new(join(prefix, "beta"), &[dim], Init::Zeros),
        ]
    }

    pub fn bind(b: &Binding, prefix: &str) -> Result<Self> {
        Ok(LayerNorm {
            gamma: b.var(&join(prefix, "gamma"))?,
            beta: b.var(&join(prefix, "beta"))?,
            eps: LN_EPS,
        })
    }
}

/// `W·X + b·1ᵀ`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn specs(prefix: &str, out_dim: usize, in_dim: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::matrix(join(prefix, "w"), out_dim, in_dim),
            ParamSpec::bias(join(prefix, "b"), out_dim),
        ]
    }

    pub fn bind(b: &Binding, prefix: &str) -> Result<Self> {
        Ok(Linear {
            w: b.var(&join(prefix, "w"))?,
            b: b.var(&join(prefix, "b"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(self.w, x)?;
        tape.add_bias(y, self.b)
    }
}

/// Query/key projections of every head (Θ).
#[derive(Clone, Copy, Debug)]
pub struct QueryKey {
    pub query: Linear,
    pub key: Linear,
}

impl QueryKey {
    /// `d_in` is the key dimension `d_k`; all heads together project to `d_k`.
    pub fn specs(prefix: &str, d_in: usize) -> Vec<ParamSpec> {
        let mut s = Linear::specs(&join(prefix, "q"), d_in, d_in);
        s.extend(Linear::specs(&join(prefix, "k"), d_in, d_in));
        s
    }

    pub fn bind(b: &Binding, prefix: &str) -> Result<Self> {
        Ok(QueryKey {
            query: Linear::bind(b, &join(prefix, "q"))?,
            key: Linear::bind(b, &join(prefix, "k"))?,
        })
    }
}

/// Value projections of every head and the output projection (Φ).
#[derive(Clone, Copy, Debug)]
pub struct ValueOut {
    pub value: Linear,
    pub output: Linear,
}

impl ValueOut {
    pub fn specs(prefix: &str, d_v: usize) -> Vec<ParamSpec> {
        let mut s = Linear::specs(&join(prefix, "v"), d_v, d_v);
        s.extend(Linear::specs(&join(prefix, "o"), d_v, d_v));
        s
    }

    pub fn bind(b: &Binding, prefix: &str) -> Result<Self> {
        Ok(ValueOut {
            value: Linear::bind(b, &join(prefix, "v"))?,
            output: Linear::bind(b, &join(prefix, "o"))?,
        })
    }
}

/// Θ and Φ of one multi-head attention.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub qk: QueryKey,
    pub vo: ValueOut,
    pub heads: usize,
}

impl Attention {
    pub fn specs(prefix: &str, d_k: usize, d_v: usize) -> Vec<ParamSpec> {
        let mut s = QueryKey::specs(&join(prefix, "theta"), d_k);
        s.extend(ValueOut::specs(&join(prefix, "phi"), d_v));
        s
    }

    pub fn bind(b: &Binding, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Attention {
            qk: QueryKey::bind(b, &join(prefix, "theta"))?,
            vo: ValueOut::bind(b, &join(prefix, "phi"))?,
            heads,
        })
    }
}

/// Ψ.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn specs(prefix: &str, dim: usize, hidden: usize) -> Vec<ParamSpec> {
        let mut s = Linear::specs(&join(prefix, "w1"), hidden, dim);
        s.extend(Linear::specs(&join(prefix, "w2"), dim, hidden));
        s
    }

    pub fn bind(b: &Binding, prefix: &str) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::bind(b, &join(prefix, "w1"))?,
            outer: Linear::bind(b, &join(prefix, "w2"))?,
        })
    }
}

pub fn layer_norm(tape: &mut Tape, x: Var, ln: &LayerNorm) -> Result<Var> {
    tape.layer_norm(x, ln.gamma, ln.beta, ln.eps)
}

/// `LN(W₀X + b₀1ᵀ)`.
pub fn frontend(tape: &mut Tape, x: Var, proj: &Linear, ln: &LayerNorm) -> Result<Var> {
    let y = proj.forward(tape, x)?;
    layer_norm(tape, y, ln)
}

/// `W₂[W₁E + b₁1ᵀ]₊ + b₂1ᵀ`.
pub fn feed_forward(tape: &mut Tape, x: Var, ffn: &FeedForward) -> Result<Var> {
    let h = ffn.inner.forward(tape, x)?;
    let h = tape.relu(h);
    ffn.outer.forward(tape, h)
}

/// `LN(x + y)`.
pub fn residual_norm(tape: &mut Tape, x: Var, y: Var, ln: &LayerNorm) -> Result<Var> {
    let s = tape.add(x, y)?;
    layer_norm(tape, s, ln)
}

/// Per-head attention weights.
///
/// For a single sequence each head holds a `T_k × T_q` matrix whose column
/// `t` is the distribution over keys for query frame `t`. For grouped
/// attention each head holds `[G × L × L]`, one such matrix per group.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub heads: Vec<Var>,
    pub keys: usize,
}

fn head_dim(rows: usize, heads: usize) -> Result<usize> {
    if heads == 0 || rows % heads != 0 {
        return Err(shape_err!("dimension {rows} is not divisible by {heads} heads"));
    }
    Ok(rows / heads)
}

/// Softmax-normalized scaled dot products of already projected queries and
/// keys. With `groups > 1` the columns split into `groups` contiguous runs
/// that attend only within themselves.
fn weights_from_projections(
    tape: &mut Tape,
    q: Var,
    k: Var,
    heads: usize,
    groups: usize,
    scale: f64,
) -> Result<AttentionWeights> {
    tape.bump(ATTENTION_WEIGHTS_COUNTER);
    let dh = head_dim(tape.shape(q)[0], heads)?;
    let keys = tape.shape(k)[1] / groups;
    let mut out = Vec::with_capacity(heads);
    for i in 0..heads {
        let qi = tape.slice_rows(q, i * dh, (i + 1) * dh)?;
        let ki = tape.slice_rows(k, i * dh, (i + 1) * dh)?;
        let logits = if groups == 1 {
            let kt = tape.transpose(ki)?;
            tape.matmul(kt, qi)?
        } else {
            let qg = tape.to_groups(qi, groups)?;
            let kg = tape.to_groups(ki, groups)?;
            let kt = tape.transpose(kg)?;
            tape.bmm(kt, qg)?
        };
        let logits = tape.scale(logits, 1.0 / scale);
        out.push(tape.softmax_columns(logits)?);
    }
    Ok(AttentionWeights { heads: out, keys })
}

/// `V⁽ⁱ⁾A⁽ⁱ⁾ᵀ` for one head. A 2-D weight matrix is shared by every
/// `T_k`-column run of `v` (the per-channel value paths of co-attention); a
/// 3-D one pairs group `g` of `v` with group `g` of the weights.
fn mix_head(tape: &mut Tape, v: Var, a: Var, keys: usize) -> Result<Var> {
    let dh = tape.shape(v)[0];
    let cols = tape.shape(v)[1];
    match tape.shape(a).len() {
        2 => {
            let runs = cols / keys;
            if runs * keys != cols {
                return Err(shape_err!("{cols} value columns for {keys} keys"));
            }
            if runs == 1 {
                return tape.matmul(v, a);
            }
            let tq = tape.shape(a)[1];
            let vg = tape.to_groups(v, runs)?;
            let stacked = tape.reshape(vg, &[runs * dh, keys])?;
            let mixed = tape.matmul(stacked, a)?;
            let mixed = tape.reshape(mixed, &[runs, dh, tq])?;
            tape.from_groups(mixed)
        }
        _ => {
            let groups = tape.shape(a)[0];
            let vg = tape.to_groups(v, groups)?;
            let mixed = tape.bmm(vg, a)?;
            tape.from_groups(mixed)
        }
    }
}

/// Applies precomputed attention weights to values `v` under Φ.
pub fn attend(tape: &mut Tape, v: Var, w: &AttentionWeights, vo: &ValueOut) -> Result<Var> {
    let vp = vo.value.forward(tape, v)?;
    let dh = head_dim(tape.shape(vp)[0], w.heads.len())?;
    let mut mixed = Vec::with_capacity(w.heads.len());
    for (i, &a) in w.heads.iter().enumerate() {
        let vi = tape.slice_rows(vp, i * dh, (i + 1) * dh)?;
        mixed.push(mix_head(tape, vi, a, w.keys)?);
    }
    let stacked = if mixed.len() == 1 {
        mixed[0]
    } else {
        tape.concat_rows(&mixed)?
    };
    vo.output.forward(tape, stacked)
}

/// Attention weights of MA for queries `q: d_k×T_q` and keys `k: d_k×T_k`.
pub fn attention_weights(
    tape: &mut Tape,
    q: Var,
    k: Var,
    qk: &QueryKey,
    heads: usize,
) -> Result<AttentionWeights> {
    let d_k = tape.shape(q)[0];
    if tape.shape(k)[0] != d_k {
        return Err(shape_err!("query dim {d_k} vs key dim {}", tape.shape(k)[0]));
    }
    let qp = qk.query.forward(tape, q)?;
    let kp = qk.key.forward(tape, k)?;
    let scale = (d_k as f64 / heads as f64).sqrt();
    weights_from_projections(tape, qp, kp, heads, 1, scale)
}

/// Multi-head scaled dot-product attention, `MA(Q, K, V; Θ, Φ)`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    attn: &Attention,
) -> Result<Var> {
    if tape.shape(k)[1] != tape.shape(v)[1] {
        return Err(shape_err!(
            "keys {:?} and values {:?} differ in length",
            tape.shape(k),
            tape.shape(v)
        ));
    }
    let w = attention_weights(tape, q, k, &attn.qk, attn.heads)?;
    attend(tape, v, &w, &attn.vo)
}

/// Self-attention run independently over `groups` contiguous column runs of
/// `x: d × (G·L)`, sharing one parameter set.
pub fn grouped_self_attention(
    tape: &mut Tape,
    x: Var,
    attn: &Attention,
    groups: usize,
) -> Result<Var> {
    let [d, cols] = tape.shape(x)[..] else {
        return Err(shape_err!("grouped attention needs a matrix"));
    };
    if groups == 0 || cols % groups != 0 {
        return Err(shape_err!("cannot split {cols} columns into {groups} groups"));
    }
    let qp = attn.qk.query.forward(tape, x)?;
    let kp = attn.qk.key.forward(tape, x)?;
    let scale = (d as f64 / attn.heads as f64).sqrt();
    let w = weights_from_projections(tape, qp, kp, attn.heads, groups, scale)?;
    attend(tape, x, &w, &attn.vo)
}

/// Co-attention weights from channel-major packed queries and keys
/// (`d_k × (C·T)` each). Logits of head `i` are `Σ_c K_c⁽ⁱ⁾ᵀ Q_c⁽ⁱ⁾`
/// scaled by `√(C·d_k/h)`.
pub fn co_attention_weights_packed(
    tape: &mut Tape,
    q_all: Var,
    k_all: Var,
    channels: usize,
    qk: &QueryKey,
    heads: usize,
) -> Result<AttentionWeights> {
    let (&[d_k, q_cols], &[k_rows, k_cols]) = (tape.shape(q_all), tape.shape(k_all)) else {
        return Err(shape_err!("packed queries and keys must be matrices"));
    };
    if channels == 0 || q_cols % channels != 0 || k_cols % channels != 0 || k_rows != d_k {
        return Err(shape_err!(
            "packed co-attention inputs {:?}, {:?} for {channels} channels",
            tape.shape(q_all),
            tape.shape(k_all)
        ));
    }
    let qp = qk.query.forward(tape, q_all)?;
    let kp = qk.key.forward(tape, k_all)?;
    let dh = head_dim(d_k, heads)?;
    // Stack channels along rows so one product sums over them.
    let stack = |tape: &mut Tape, x: Var| -> Result<Var> {
        if channels == 1 {
            return Ok(x);
        }
        let t = tape.shape(x)[1] / channels;
        let g = tape.to_groups(x, channels)?;
        tape.reshape(g, &[channels * dh, t])
    };
    let mut qs = Vec::with_capacity(heads);
    let mut ks = Vec::with_capacity(heads);
    for i in 0..heads {
        let qi = tape.slice_rows(qp, i * dh, (i + 1) * dh)?;
        let ki = tape.slice_rows(kp, i * dh, (i + 1) * dh)?;
        qs.push(stack(tape, qi)?);
        ks.push(stack(tape, ki)?);
    }
    let q_cat = tape.concat_rows(&qs)?;
    let k_cat = tape.concat_rows(&ks)?;
    let scale = (channels as f64 * d_k as f64 / heads as f64).sqrt();
    weights_from_projections(tape, q_cat, k_cat, heads, 1, scale)
}

/// Packs per-channel `d×T` matrices channel-major into `d × (C·T)`.
pub fn pack_channels(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let first = xs.first().ok_or_else(|| shape_err!("empty channel list"))?;
    let shape = tape.shape(*first).to_vec();
    if xs.iter().any(|&x| tape.shape(x) != shape.as_slice()) {
        return Err(shape_err!("channels differ in shape"));
    }
    if xs.len() == 1 {
        return Ok(xs[0]);
    }
    tape.concat_cols(xs)
}

/// Multi-head co-attention, `MCA(Qs, Ks, V; Θ, Φ)`.
pub fn multi_head_co_attention(
    tape: &mut Tape,
    qs: &[Var],
    ks: &[Var],
    v: Var,
    qk: &QueryKey,
    vo: &ValueOut,
    heads: usize,
) -> Result<Var> {
    if qs.len() != ks.len() {
        return Err(shape_err!(
            "{} query channels but {} key channels",
            qs.len(),
            ks.len()
        ));
    }
    let q_all = pack_channels(tape, qs)?;
    let k_all = pack_channels(tape, ks)?;
    let w = co_attention_weights_packed(tape, q_all, k_all, qs.len(), qk, heads)?;
    attend(tape, v, &w, vo)
}

//! Encoder stacks: Transformer, spatio-temporal and co-attention.
//!
//! Multi-channel activations are packed channel-major (`D × (C·T)`), see
//! [`crate::nn`]. No parameter depends on the channel count, so one set of
//! weights serves any number of microphones.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::features::ModelInput;
use crate::nn::{
    self, co_attention_weights_packed, feed_forward, frontend, grouped_self_attention,
    multi_head_attention, residual_norm, Attention, FeedForward, LayerNorm, Linear, QueryKey,
    ValueOut,
};
use crate::params::{Binding, ParamSpec};
use crate::tape::{Tape, Var};

/// Counts co-attention weight evaluations; one per co-attention block.
pub const CO_ATTENTION_WEIGHTS_COUNTER: &str = "co_attention_weights";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Transformer,
    SpatioTemporal,
    CoAttention,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Transformer => "transformer",
            Variant::SpatioTemporal => "spatio_temporal",
            Variant::CoAttention => "co_attention",
        }
    }

    pub fn is_multi_channel(self) -> bool {
        !matches!(self, Variant::Transformer)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Variant::Transformer),
            "spatio_temporal" => Ok(Variant::SpatioTemporal),
            "co_attention" => Ok(Variant::CoAttention),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Spliced single-channel feature dimension `F`.
    pub input_dim: usize,
    /// Per-channel feature dimension of the co-attention multi-channel path.
    pub multi_input_dim: usize,
    /// `D`.
    pub d_model: usize,
    /// `D'`.
    pub d_multi: usize,
    pub heads: usize,
    /// `d_f`.
    pub ff_dim: usize,
    /// Hidden width of the multi-channel feed-forward network `Ψ_P`.
    pub ff_dim_multi: usize,
    /// `N`.
    pub blocks: usize,
    /// `S`.
    pub speakers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::CoAttention,
            input_dim: 345,
            multi_input_dim: 23,
            d_model: 256,
            d_multi: 64,
            heads: 4,
            ff_dim: 1024,
            ff_dim_multi: 256,
            blocks: 4,
            speakers: 2,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Dimension of `E⁽ᴺ⁾` and of every attractor.
    pub fn attractor_dim(&self) -> usize {
        match self.variant {
            Variant::CoAttention => self.d_model + self.d_multi,
            _ => self.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks == 0 {
            return bad("at least one encoder block is required".into());
        }
        if self.speakers == 0 || self.speakers > 6 {
            return bad(format!("speakers must be in 1..=6, got {}", self.speakers));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.variant == Variant::CoAttention && self.d_multi % self.heads != 0 {
            return bad(format!("d_multi {} not divisible by {} heads", self.d_multi, self.heads));
        }
        if [self.input_dim, self.multi_input_dim, self.ff_dim, self.ff_dim_multi, self.d_multi]
            .contains(&0)
        {
            return bad("dimensions must be positive".into());
        }
        Ok(())
    }

    /// Names and shapes of every encoder parameter.
    pub fn encoder_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let mut s = [
            Linear::specs("frontend.proj", d, self.input_dim),
            LayerNorm::specs("frontend.ln", d),
        ]
        .concat();
        if self.variant == Variant::CoAttention {
            let dp = self.d_multi;
            s.extend(Linear::specs("frontend_multi.proj", dp, self.multi_input_dim));
            s.extend(LayerNorm::specs("frontend_multi.ln", dp));
        }
        for n in 0..self.blocks {
            let b = format!("blocks.{n}");
            match self.variant {
                Variant::Transformer => {
                    s.extend(Attention::specs(&format!("{b}.attn"), d, d));
                    s.extend(LayerNorm::specs(&format!("{b}.ln_attn"), d));
                    s.extend(FeedForward::specs(&format!("{b}.ffn"), d, self.ff_dim));
                    s.extend(LayerNorm::specs(&format!("{b}.ln_ffn"), d));
                }
                Variant::SpatioTemporal => {
                    s.extend(Attention::specs(&format!("{b}.cross_channel"), d, d));
                    s.extend(LayerNorm::specs(&format!("{b}.ln_channel"), d));
                    s.extend(Attention::specs(&format!("{b}.cross_frame"), d, d));
                    s.extend(LayerNorm::specs(&format!("{b}.ln_frame"), d));
                }
                Variant::CoAttention => {
                    let dp = self.d_multi;
                    s.extend(QueryKey::specs(&format!("{b}.theta_p"), dp));
                    s.extend(ValueOut::specs(&format!("{b}.phi_e"), d));
                    s.extend(ValueOut::specs(&format!("{b}.phi_p"), dp));
                    s.extend(LayerNorm::specs(&format!("{b}.ln_e_mca"), d));
                    s.extend(Attention::specs(&format!("{b}.attn_e"), d, d));
                    s.extend(LayerNorm::specs(&format!("{b}.ln_e_attn"), d));
                    s.extend(FeedForward::specs(&format!("{b}.psi_e"), d, self.ff_dim));
                    s.extend(LayerNorm::specs(&format!("{b}.ln_e_ffn"), d));
                    s.extend(LayerNorm::specs(&format!("{b}.ln_p_mca"), dp));
                    s.extend(FeedForward::specs(&format!("{b}.psi_p"), dp, self.ff_dim_multi));
                    s.extend(LayerNorm::specs(&format!("{b}.ln_p_ffn"), dp));
                }
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub attn: Attention,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl TransformerBlock {
    pub fn bind(b: &Binding, prefix: &str, heads: usize) -> Result<Self> {
        Ok(TransformerBlock {
            attn: Attention::bind(b, &format!("{prefix}.attn"), heads)?,
            ln_attn: LayerNorm::bind(b, &format!("{prefix}.ln_attn"))?,
            ffn: FeedForward::bind(b, &format!("{prefix}.ffn"))?,
            ln_ffn: LayerNorm::bind(b, &format!("{prefix}.ln_ffn"))?,
        })
    }
}

/// Cross-channel then cross-frame self-attention; no feed-forward network.
#[derive(Clone, Copy, Debug)]
pub struct SpatioTemporalBlock {
    pub cross_channel: Attention,
    pub ln_channel: LayerNorm,
    pub cross_frame: Attention,
    pub ln_frame: LayerNorm,
}

impl SpatioTemporalBlock {
    pub fn bind(b: &Binding, prefix: &str, heads: usize) -> Result<Self> {
        Ok(SpatioTemporalBlock {
            cross_channel: Attention::bind(b, &format!("{prefix}.cross_channel"), heads)?,
            ln_channel: LayerNorm::bind(b, &format!("{prefix}.ln_channel"))?,
            cross_frame: Attention::bind(b, &format!("{prefix}.cross_frame"), heads)?,
            ln_frame: LayerNorm::bind(b, &format!("{prefix}.ln_frame"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CoAttentionBlock {
    /// Θ_P, shared by the single-channel and the multi-channel co-attention.
    pub theta_p: QueryKey,
    pub phi_e: ValueOut,
    pub phi_p: ValueOut,
    pub ln_e_mca: LayerNorm,
    /// Θ'_E, Φ'_E.
    pub attn_e: Attention,
    pub ln_e_attn: LayerNorm,
    pub psi_e: FeedForward,
    pub ln_e_ffn: LayerNorm,
    pub ln_p_mca: LayerNorm,
    pub psi_p: FeedForward,
    pub ln_p_ffn: LayerNorm,
    pub heads: usize,
}

impl CoAttentionBlock {
    pub fn bind(b: &Binding, prefix: &str, heads: usize) -> Result<Self> {
        let p = |n: &str| format!("{prefix}.{n}");
        Ok(CoAttentionBlock {
            theta_p: QueryKey::bind(b, &p("theta_p"))?,
            phi_e: ValueOut::bind(b, &p("phi_e"))?,
            phi_p: ValueOut::bind(b, &p("phi_p"))?,
            ln_e_mca: LayerNorm::bind(b, &p("ln_e_mca"))?,
            attn_e: Attention::bind(b, &p("attn_e"), heads)?,
            ln_e_attn: LayerNorm::bind(b, &p("ln_e_attn"))?,
            psi_e: FeedForward::bind(b, &p("psi_e"))?,
            ln_e_ffn: LayerNorm::bind(b, &p("ln_e_ffn"))?,
            ln_p_mca: LayerNorm::bind(b, &p("ln_p_mca"))?,
            psi_p: FeedForward::bind(b, &p("psi_p"))?,
            ln_p_ffn: LayerNorm::bind(b, &p("ln_p_ffn"))?,
            heads,
        })
    }
}

/// `E' = LN(E_in + MA(E_in, E_in, E_in))`, `E_out = LN(E' + FFN(E'))`.
pub fn transformer_block(tape: &mut Tape, e_in: Var, p: &TransformerBlock) -> Result<Var> {
    let a = multi_head_attention(tape, e_in, e_in, e_in, &p.attn)?;
    let e1 = residual_norm(tape, e_in, a, &p.ln_attn)?;
    let f = feed_forward(tape, e1, &p.ffn)?;
    residual_norm(tape, e1, f, &p.ln_ffn)
}

fn channel_count(tape: &Tape, packed: Var, channels: usize) -> Result<usize> {
    let cols = tape.shape(packed)[1];
    if channels == 0 || cols % channels != 0 {
        return Err(shape_err!("{cols} packed columns for {channels} channels"));
    }
    Ok(cols / channels)
}

/// Column permutation from channel-major (`c·T + t`) to frame-major
/// (`t·C + c`) order.
fn frame_major(channels: usize, frames: usize) -> Vec<usize> {
    (0..frames)
        .flat_map(|t| (0..channels).map(move |c| c * frames + t))
        .collect()
}

fn channel_major(channels: usize, frames: usize) -> Vec<usize> {
    (0..channels)
        .flat_map(|c| (0..frames).map(move |t| t * channels + c))
        .collect()
}

/// Mean over channels of a packed `d × (C·T)` activation.
pub fn channel_mean(tape: &mut Tape, packed: Var, channels: usize) -> Result<Var> {
    let t = channel_count(tape, packed, channels)?;
    if channels == 1 {
        return Ok(packed);
    }
    let parts = (0..channels)
        .map(|c| tape.slice_cols(packed, c * t, (c + 1) * t))
        .collect::<Result<Vec<_>>>()?;
    tape.mean(&parts)
}

/// One spatio-temporal block over packed `E_in: D × (C·T)`.
///
/// Returns the packed `D × (C·T)` output, or `D × T` for the final block,
/// whose cross-frame attention runs over the channel average.
pub fn spatio_temporal_block(
    tape: &mut Tape,
    e_in: Var,
    channels: usize,
    p: &SpatioTemporalBlock,
    is_final: bool,
) -> Result<Var> {
    let frames = channel_count(tape, e_in, channels)?;
    let by_frame = if channels == 1 {
        e_in
    } else {
        tape.permute_cols(e_in, &frame_major(channels, frames))?
    };
    let a = grouped_self_attention(tape, by_frame, &p.cross_channel, frames)?;
    let e1 = residual_norm(tape, by_frame, a, &p.ln_channel)?;
    let e1 = if channels == 1 {
        e1
    } else {
        tape.permute_cols(e1, &channel_major(channels, frames))?
    };
    if is_final {
        let avg = channel_mean(tape, e1, channels)?;
        let a = multi_head_attention(tape, avg, avg, avg, &p.cross_frame)?;
        residual_norm(tape, avg, a, &p.ln_frame)
    } else {
        let a = grouped_self_attention(tape, e1, &p.cross_frame, channels)?;
        residual_norm(tape, e1, a, &p.ln_frame)
    }
}

/// Output of one co-attention block.
#[derive(Clone, Copy, Debug)]
pub enum CoAttentionOutput {
    /// `E_out: D×T` and packed `P_out: D' × (C·T)`.
    Hidden { e: Var, p: Var },
    /// `[E_out; mean_c P_out,c]`, `(D+D') × T`.
    Final(Var),
}

/// One co-attention block. The attention weights are computed once from the
/// multi-channel input and reused by the single-channel path and every
/// channel of the multi-channel path.
pub fn co_attention_block(
    tape: &mut Tape,
    e_in: Var,
    p_in: Var,
    channels: usize,
    p: &CoAttentionBlock,
    is_final: bool,
) -> Result<CoAttentionOutput> {
    let frames = channel_count(tape, p_in, channels)?;
    if tape.shape(e_in)[1] != frames {
        return Err(shape_err!(
            "single-channel input has {} frames, multi-channel {frames}",
            tape.shape(e_in)[1]
        ));
    }
    tape.bump(CO_ATTENTION_WEIGHTS_COUNTER);
    let w = co_attention_weights_packed(tape, p_in, p_in, channels, &p.theta_p, p.heads)?;

    let a = nn::attend(tape, e_in, &w, &p.phi_e)?;
    let e1 = residual_norm(tape, e_in, a, &p.ln_e_mca)?;
    let a = multi_head_attention(tape, e1, e1, e1, &p.attn_e)?;
    let e2 = residual_norm(tape, e1, a, &p.ln_e_attn)?;
    let f = feed_forward(tape, e2, &p.psi_e)?;
    let e_out = residual_norm(tape, e2, f, &p.ln_e_ffn)?;

    let a = nn::attend(tape, p_in, &w, &p.phi_p)?;
    let p1 = residual_norm(tape, p_in, a, &p.ln_p_mca)?;
    let f = feed_forward(tape, p1, &p.psi_p)?;
    let p_out = residual_norm(tape, p1, f, &p.ln_p_ffn)?;

    if is_final {
        let p_avg = channel_mean(tape, p_out, channels)?;
        Ok(CoAttentionOutput::Final(tape.concat_rows(&[e_out, p_avg])?))
    } else {
        Ok(CoAttentionOutput::Hidden { e: e_out, p: p_out })
    }
}

/// Frontend(s) followed by `N` blocks; returns `E⁽ᴺ⁾`.
pub fn encode_session(
    tape: &mut Tape,
    b: &Binding,
    config: &ModelConfig,
    input: &ModelInput,
) -> Result<Var> {
    input.check(config)?;
    let fe = Linear::bind(b, "frontend.proj")?;
    let fe_ln = LayerNorm::bind(b, "frontend.ln")?;
    let block = |n: usize| format!("blocks.{n}");
    match (config.variant, input) {
        (Variant::Transformer, ModelInput::Single(x)) => {
            let x = tape.constant(x.clone());
            let mut e = frontend(tape, x, &fe, &fe_ln)?;
            for n in 0..config.blocks {
                let p = TransformerBlock::bind(b, &block(n), config.heads)?;
                e = transformer_block(tape, e, &p)?;
            }
            Ok(e)
        }
        (Variant::SpatioTemporal, ModelInput::MultiChannel(xs)) => {
            let xs: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let packed = nn::pack_channels(tape, &xs)?;
            let mut e = frontend(tape, packed, &fe, &fe_ln)?;
            for n in 0..config.blocks {
                let p = SpatioTemporalBlock::bind(b, &block(n), config.heads)?;
                e = spatio_temporal_block(tape, e, xs.len(), &p, n + 1 == config.blocks)?;
            }
            Ok(e)
        }
        (Variant::CoAttention, ModelInput::CoAttention { averaged, channels }) => {
            let x = tape.constant(averaged.clone());
            let mut e = frontend(tape, x, &fe, &fe_ln)?;
            let xs: Vec<Var> = channels.iter().map(|x| tape.constant(x.clone())).collect();
            let packed = nn::pack_channels(tape, &xs)?;
            let fm = Linear::bind(b, "frontend_multi.proj")?;
            let fm_ln = LayerNorm::bind(b, "frontend_multi.ln")?;
            let mut p = frontend(tape, packed, &fm, &fm_ln)?;
            for n in 0..config.blocks {
                let params = CoAttentionBlock::bind(b, &block(n), config.heads)?;
                match co_attention_block(tape, e, p, xs.len(), &params, n + 1 == config.blocks)? {
                    CoAttentionOutput::Hidden { e: e2, p: p2 } => {
                        e = e2;
                        p = p2;
                    }
                    CoAttentionOutput::Final(out) => return Ok(out),
                }
            }
            unreachable!("final block returns")
        }
        (v, _) => Err(Error::Config(format!(
            "{} model cannot take {} input",
            v.name(),
            input.kind()
        ))),
    }
}

/// Analytic count of stored forward activations (in values, not bytes).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationReport {
    pub variant: Variant,
    pub frames: usize,
    pub channels: usize,
    /// Residual-stage outputs per block that carry a channel axis.
    pub per_channel_embeddings_per_block: usize,
    /// Residual-stage outputs per block without a channel axis.
    pub shared_embeddings_per_block: usize,
    /// Attention-weight entries per block.
    pub attention_weights_per_block: usize,
    /// Every intermediate the tape keeps for one forward pass, all blocks,
    /// frontends and the attractor head included.
    pub total_stored: usize,
}

impl ActivationReport {
    pub fn embeddings_per_block(&self) -> usize {
        self.per_channel_embeddings_per_block + self.shared_embeddings_per_block
    }

    pub fn per_block(&self) -> usize {
        self.embeddings_per_block() + self.attention_weights_per_block
    }
}

/// Stored values of one MA over `n` query columns split into groups of `l`
/// (projections, per-head slices and logits, mixing, output).
fn attention_storage(d: usize, n: usize, l: usize, heads: usize, grouped: bool) -> usize {
    let dh = d / heads;
    let proj = 3 * d * n;
    let weights_per_head = n * l;
    let logits = heads * (2 * dh * n + dh * n + 3 * weights_per_head);
    let grouped_copies = if grouped { heads * 3 * dh * n } else { 0 };
    let mixing = heads * (dh * n + dh * n) + d * n;
    proj + logits + grouped_copies + mixing + 2 * d * n
}

fn ffn_storage(d: usize, hidden: usize, n: usize) -> usize {
    3 * hidden * n + 2 * d * n
}

fn residual_ln_storage(d: usize, n: usize) -> usize {
    2 * d * n
}

/// Analytic activation counts for one forward pass over `frames` frames and
/// `channels` channels.
pub fn count_activations(config: &ModelConfig, frames: usize, channels: usize) -> ActivationReport {
    let (t, c, h) = (frames, channels.max(1), config.heads);
    let (d, dp) = (config.d_model, config.d_multi);
    let n_blocks = config.blocks;
    let attractor = config.attractor_dim();
    let frontend = |dim_in: usize, dim: usize, n: usize| dim_in * n + 2 * dim * n;
    let eda = 2 * attractor * t + t * (4 * attractor * 7 + attractor * 3)
        + config.speakers * (4 * attractor * 7 + attractor * 3)
        + 3 * config.speakers * t;
    let (per_channel, shared, weights, blocks_total, front) = match config.variant {
        Variant::Transformer => {
            let per = attention_storage(d, t, t, h, false)
                + residual_ln_storage(d, t)
                + ffn_storage(d, config.ff_dim, t)
                + residual_ln_storage(d, t);
            (0, 2 * d * t, h * t * t, per * n_blocks, frontend(config.input_dim, d, t))
        }
        Variant::SpatioTemporal => {
            let n = c * t;
            let cross_channel = attention_storage(d, n, c, h, true) + residual_ln_storage(d, n);
            let permutes = if c > 1 { 2 * d * n } else { 0 };
            let hidden = attention_storage(d, n, t, h, true) + residual_ln_storage(d, n);
            let last = d * n + attention_storage(d, t, t, h, false) + residual_ln_storage(d, t);
            let total = (cross_channel + permutes) * n_blocks
                + hidden * (n_blocks - 1)
                + last;
            (
                2 * d * n,
                0,
                h * n * c + h * c * t * t,
                total,
                frontend(config.input_dim, d, n),
            )
        }
        Variant::CoAttention => {
            let n = c * t;
            let dph = dp / h;
            let mca_weights = 2 * dp * n + h * (2 * dph * n + 2 * dph * n) + 2 * c * dp * t
                + h * (3 * t * t);
            let e_path = (d * t + h * 2 * (d / h) * t + 2 * d * t)
                + residual_ln_storage(d, t)
                + attention_storage(d, t, t, h, false)
                + residual_ln_storage(d, t)
                + ffn_storage(d, config.ff_dim, t)
                + residual_ln_storage(d, t);
            let p_path = (dp * n + h * 4 * dph * n + 2 * dp * n)
                + residual_ln_storage(dp, n)
                + ffn_storage(dp, config.ff_dim_multi, n)
                + residual_ln_storage(dp, n);
            let total = (mca_weights + e_path + p_path) * n_blocks + (dp + d) * t;
            (
                2 * dp * n,
                3 * d * t,
                2 * h * t * t,
                total,
                frontend(config.input_dim, d, t) + frontend(config.multi_input_dim, dp, n),
            )
        }
    };
    ActivationReport {
        variant: config.variant,
        frames: t,
        channels: c,
        per_channel_embeddings_per_block: per_channel,
        shared_embeddings_per_block: shared,
        attention_weights_per_block: weights,
        total_stored: blocks_total + front + eda,
    }
}

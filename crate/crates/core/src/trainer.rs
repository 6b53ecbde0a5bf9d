//! Training loop: Adam with a Noam schedule, channel-subset sampling,
//! channel dropout and freeze-based adaptation. Also the evaluation helpers
//! used after training.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::encoders::{ModelConfig, Variant};
use crate::error::{shape_err, Error, Result};
use crate::features::SessionFeatures;
use crate::model::{forward, Model};
use crate::params::{Binding, ParamStore};
use crate::pit::pit_loss;
use crate::scoring::{
    average_posteriors_across_channels, der, posteriors_to_segments, DecodeConfig, ScoreReport,
    Segment, SessionScore,
};
use crate::simulate::GroundTruth;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// `k · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64, k: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config("learning-rate steps start at 1".into()));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::Config("warmup and d_model must be positive".into()));
    }
    let s = step as f64;
    Ok(k * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected update of every parameter that has a gradient
    /// and is not frozen. Frozen parameters keep their moments as well.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        frozen: &BTreeSet<String>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if frozen.contains(name) {
                continue;
            }
            let p = params
                .get(name)
                .ok_or_else(|| Error::Backward(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(shape_err!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            if frozen.contains(name) {
                continue;
            }
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let iter = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
            for (((p, m), v), &g) in iter {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `k` of `available` channels without replacement; with probability
/// `dropout` the draw is then reduced to one of them.
pub fn sample_training_channels<R: Rng + ?Sized>(
    available: usize,
    subset: usize,
    dropout: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if subset == 0 || subset > available {
        return Err(Error::Config(format!("cannot pick {subset} of {available} channels")));
    }
    if !(0.0..=1.0).contains(&dropout) {
        return Err(Error::Config(format!("channel dropout {dropout} outside [0, 1]")));
    }
    let mut chosen = index::sample(rng, available, subset).into_vec();
    if rng.gen_bool(dropout) {
        let keep = *chosen.choose(rng).expect("non-empty");
        chosen = vec![keep];
    }
    Ok(chosen)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    #[default]
    None,
    ChannelInvariant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Pretrain,
    Adapt,
}

/// Parameters left untouched when adapting on single-channel data.
pub fn freeze_set(config: &ModelConfig, policy: FreezePolicy) -> BTreeSet<String> {
    if policy == FreezePolicy::None {
        return BTreeSet::new();
    }
    let frozen = |name: &str| -> bool {
        let Some(rest) = name.strip_prefix("blocks.") else {
            return config.variant == Variant::CoAttention && name.starts_with("frontend_multi.");
        };
        let part = rest.split('.').nth(1).unwrap_or("");
        match config.variant {
            Variant::Transformer => false,
            Variant::SpatioTemporal => part == "cross_channel",
            Variant::CoAttention => {
                matches!(part, "theta_p" | "phi_p" | "psi_p" | "ln_p_mca" | "ln_p_ffn")
            }
        }
    };
    Model::specs(config)
        .into_iter()
        .map(|s| s.name)
        .filter(|n| frozen(n))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Frames per training chunk; shorter sessions are used whole.
    pub chunk_frames: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps in total, if set.
    pub max_steps: Option<u64>,
    pub warmup: u64,
    /// Noam scale `k`.
    pub noam_scale: f64,
    /// Learning rate in adapt mode.
    pub adapt_lr: f64,
    pub freeze_policy: FreezePolicy,
    /// Channels drawn per training sample, capped at what is available.
    pub channel_subset: usize,
    pub channel_dropout: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Feed frames to the attractor encoder in random order.
    pub shuffle_frames: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Pretrain,
            chunk_frames: 500,
            batch_size: 8,
            epochs: 500,
            max_steps: None,
            warmup: 100_000,
            noam_scale: 1.0,
            adapt_lr: 1e-5,
            freeze_policy: FreezePolicy::None,
            channel_subset: 4,
            channel_dropout: 0.1,
            grad_clip: 5.0,
            shuffle_frames: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.chunk_frames == 0 || self.batch_size == 0 {
            return bad("chunk_frames and batch_size must be positive".into());
        }
        if self.channel_subset == 0 {
            return bad("channel_subset must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.channel_dropout) {
            return bad(format!("channel_dropout {} outside [0, 1]", self.channel_dropout));
        }
        if self.warmup == 0 {
            return bad("warmup must be positive".into());
        }
        if !(self.noam_scale >= 0.0 && self.adapt_lr >= 0.0 && self.grad_clip >= 0.0) {
            return bad("noam_scale, adapt_lr and grad_clip must be non-negative".into());
        }
        Ok(())
    }

    pub fn learning_rate(&self, step: u64, d_model: usize) -> Result<f64> {
        match self.mode {
            TrainMode::Pretrain => noam_lr(step, d_model, self.warmup, self.noam_scale),
            TrainMode::Adapt => Ok(self.adapt_lr),
        }
    }
}

/// One training session: features plus `S × T` reference activity.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub features: SessionFeatures,
    pub labels: Tensor,
}

impl TrainItem {
    /// Labels at the feature frame rate, padded with silent speakers up to
    /// `speakers` rows.
    pub fn new(
        id: &str,
        features: SessionFeatures,
        reference: &[Segment],
        speakers: usize,
        frame_period: f64,
    ) -> Result<Self> {
        let frames = features.frames();
        if frames == 0 {
            return Err(Error::Data(format!("{id}: no feature frames")));
        }
        let truth = GroundTruth::from_segments(reference, frames as f64 * frame_period);
        if truth.speakers() > speakers {
            return Err(Error::Data(format!(
                "{id}: {} reference speakers, model has {speakers}",
                truth.speakers()
            )));
        }
        let found = truth.labels(frames, frame_period);
        let mut labels = Tensor::zeros(&[speakers, frames]);
        labels.data_mut()[..found.numel()].copy_from_slice(found.data());
        Ok(TrainItem {
            id: id.into(),
            features,
            labels,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub item: usize,
    pub start: usize,
    pub end: usize,
}

/// Non-overlapping windows; the trailing partial window is dropped unless
/// it is the whole session.
pub fn make_chunks(items: &[TrainItem], chunk_frames: usize) -> Vec<Chunk> {
    let mut out = Vec::new();
    for (item, it) in items.iter().enumerate() {
        let t = it.features.frames();
        if t < chunk_frames {
            out.push(Chunk { item, start: 0, end: t });
            continue;
        }
        for k in 0..t / chunk_frames {
            out.push(Chunk {
                item,
                start: k * chunk_frames,
                end: (k + 1) * chunk_frames,
            });
        }
    }
    out
}

/// Model plus optimizer state, and how many epochs are complete.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub epoch: usize,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl TrainState {
    pub fn new(model: Model) -> Self {
        TrainState {
            model,
            adam: AdamState::new(),
            epoch: 0,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.meta = CheckpointMeta {
            model: self.model.config.clone(),
            step: self.adam.step,
            epoch: self.epoch,
        };
        for (n, t) in &self.adam.m {
            ck.tensors.insert(format!("{ADAM_M}{n}"), t.clone());
        }
        for (n, t) in &self.adam.v {
            ck.tensors.insert(format!("{ADAM_V}{n}"), t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.model()?;
        let mut adam = AdamState {
            step: ck.meta.step,
            ..AdamState::default()
        };
        for (n, t) in &ck.tensors {
            if let Some(p) = n.strip_prefix(ADAM_M) {
                adam.m.insert(p.into(), t.clone());
            } else if let Some(p) = n.strip_prefix(ADAM_V) {
                adam.v.insert(p.into(), t.clone());
            }
        }
        Ok(TrainState {
            model,
            adam,
            epoch: ck.meta.epoch,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken after this epoch.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

const ORDER_STREAM: u64 = 1 << 40;

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

/// Loss and gradients of one chunk, channels sampled from `rng`.
fn chunk_gradients(
    model: &Model,
    item: &TrainItem,
    chunk: Chunk,
    frozen: &BTreeSet<String>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let available = item.features.num_channels();
    let channels =
        sample_training_channels(available, cfg.channel_subset.min(available), cfg.channel_dropout, rng)?;
    let input = item
        .features
        .model_input(model.config.variant, &channels, chunk.start..chunk.end)?;
    let labels = cut_columns(&item.labels, chunk.start, chunk.end);
    let mut tape = Tape::new();
    let b = Binding::bind(&mut tape, &model.params, frozen);
    let shuffle = cfg.shuffle_frames.then_some(&mut *rng);
    let out = forward(&mut tape, &b, &model.config, &input, shuffle)?;
    let (loss, _) = pit_loss(&mut tape, out.posteriors, &labels)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    Ok((value, b.grads(&tape)))
}

fn cut_columns(t: &Tensor, start: usize, end: usize) -> Tensor {
    let w = end - start;
    Tensor::from_fn(&[t.rows(), w], |i| t.get(i / w, start + i % w))
}

fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Runs epochs `state.epoch..cfg.epochs`. Chunk order depends only on the
/// seed and epoch, sampling within a step only on the seed and step, so a
/// run resumed from an epoch checkpoint follows the uninterrupted one.
/// With `out`, appends one JSON line per epoch to `train_log.jsonl` and
/// rewrites `latest.ckpt` after each epoch.
pub fn train(
    state: &mut TrainState,
    items: &[TrainItem],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let chunks = make_chunks(items, cfg.chunk_frames);
    if chunks.is_empty() {
        return Err(Error::Data("no training data".into()));
    }
    for it in items {
        if it.labels.rows() != state.model.config.speakers || it.labels.cols() != it.features.frames() {
            return Err(Error::Data(format!(
                "{}: labels {:?} do not match {} speakers x {} frames",
                it.id,
                it.labels.shape(),
                state.model.config.speakers,
                it.features.frames()
            )));
        }
    }
    let frozen = freeze_set(&state.model.config, cfg.freeze_policy);
    let mut report = TrainReport::default();
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(TRAIN_LOG_FILE);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let reached = |s: &TrainState| cfg.max_steps.is_some_and(|m| s.adam.step >= m);

    while state.epoch < cfg.epochs && !reached(state) {
        let mut order: Vec<usize> = (0..chunks.len()).collect();
        order.shuffle(&mut stream(cfg.seed, ORDER_STREAM + state.epoch as u64));
        let (mut sum, mut n, mut lr) = (0.0, 0usize, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            if reached(state) {
                break;
            }
            let step = state.adam.step + 1;
            let mut rng = stream(cfg.seed, step);
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut loss = 0.0;
            for &c in batch {
                let chunk = chunks[c];
                let (l, g) = chunk_gradients(&state.model, &items[chunk.item], chunk, &frozen, cfg, &mut rng)
                    .map_err(|e| match e {
                        Error::NonFinite(_) => Error::Divergence {
                            step: step as usize,
                            loss: f64::NAN,
                        },
                        e => e,
                    })?;
                loss += l;
                for (name, g) in g {
                    match acc.get_mut(&name) {
                        Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
            let k = batch.len() as f64;
            loss /= k;
            let norm = global_norm(&acc) / k;
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Divergence {
                    step: step as usize,
                    loss,
                });
            }
            let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                cfg.grad_clip / norm / k
            } else {
                1.0 / k
            };
            acc.values_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
            lr = cfg.learning_rate(step, state.model.config.d_model)?;
            state.adam.step(&mut state.model.params, &acc, &frozen, lr)?;
            report.step_losses.push(loss);
            sum += loss;
            n += 1;
        }
        if n < order.len().div_ceil(cfg.batch_size) {
            // stopped mid-epoch by max_steps; the epoch stays incomplete
            break;
        }
        state.epoch += 1;
        let rec = EpochRecord {
            epoch: state.epoch,
            step: state.adam.step,
            lr,
            loss: sum / n as f64,
        };
        if let (Some((path, f)), Some(dir)) = (log.as_mut(), out) {
            writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&*path, e))?;
            state.to_checkpoint().save(&dir.join(LATEST_CHECKPOINT))?;
        }
        report.epochs.push(rec);
    }
    Ok(report)
}

/// A session to decode and score.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSession {
    pub id: String,
    pub features: SessionFeatures,
    pub reference: Vec<Segment>,
}

/// Posteriors of a whole session from the listed channels. The
/// single-channel model decodes each channel separately and averages the
/// aligned posteriors.
pub fn session_posteriors(model: &Model, features: &SessionFeatures, channels: &[usize]) -> Result<Tensor> {
    let frames = 0..features.frames();
    let variant = model.config.variant;
    if variant == Variant::Transformer && channels.len() > 1 {
        let ys = channels
            .iter()
            .map(|&c| Ok((c, model.infer(&features.model_input(variant, &[c], frames.clone())?)?)))
            .collect::<Result<Vec<_>>>()?;
        return average_posteriors_across_channels(&ys);
    }
    model.infer(&features.model_input(variant, channels, frames)?)
}

/// Hypothesis segments of one session.
pub fn decode_session(
    model: &Model,
    session: &str,
    features: &SessionFeatures,
    channels: &[usize],
    decode: &DecodeConfig,
    frame_period: f64,
) -> Result<(Tensor, Vec<Segment>)> {
    let y = session_posteriors(model, features, channels)?;
    let segs = posteriors_to_segments(session, &y, decode.threshold, decode.median_window, frame_period)?;
    Ok((y, segs))
}

/// DER over `sessions` using the first `channels` microphones of each.
pub fn evaluate(
    model: &Model,
    sessions: &[EvalSession],
    channels: usize,
    decode: &DecodeConfig,
    frame_period: f64,
) -> Result<ScoreReport> {
    decode.validate()?;
    let ids: Vec<usize> = (0..channels).collect();
    let scores = sessions
        .iter()
        .map(|s| {
            let (_, hyp) = decode_session(model, &s.id, &s.features, &ids, decode, frame_period)?;
            Ok(SessionScore {
                session: s.id.clone(),
                breakdown: der(&s.reference, &hyp, decode.collar)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreReport::new(decode.collar, scores))
}

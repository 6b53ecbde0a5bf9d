//! Waveform to model-input features.
//!
//! 23 log-mel filterbank energies every 10 ms, then either spliced over
//! ±7 frames (345 dims) or averaged over the same context (23 dims), and
//! subsampled by 10 to one frame per 100 ms.

use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::encoders::{ModelConfig, Variant};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty waveform".into()));
        }
        if sample_rate != 8000 && sample_rate != 16000 {
            return Err(Error::Data(format!("unsupported sample rate {sample_rate}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
    /// Frames of context on each side (±7).
    pub context: usize,
    pub subsample: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_mels: 23,
            frame_shift_ms: 10.0,
            frame_length_ms: 25.0,
            context: 7,
            subsample: 10,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    /// Dimension of a spliced frame, `n_mels · (2·context + 1)`.
    pub fn spliced_dim(&self) -> usize {
        self.n_mels * (2 * self.context + 1)
    }

    /// Seconds covered by one subsampled frame.
    pub fn frame_period(&self) -> f64 {
        self.frame_shift_ms * self.subsample as f64 / 1000.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.subsample == 0 {
            return Err(Error::Config("n_mels and subsample must be positive".into()));
        }
        if !(self.frame_shift_ms > 0.0 && self.frame_length_ms >= self.frame_shift_ms) {
            return Err(Error::Config("frame length must be at least the shift".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }

    fn frame_samples(&self, rate: u32) -> (usize, usize) {
        let len = (self.frame_length_ms * rate as f64 / 1000.0).round() as usize;
        let shift = (self.frame_shift_ms * rate as f64 / 1000.0).round() as usize;
        (len, shift)
    }

    /// Number of 10 ms frames for `n` samples, no padding.
    pub fn num_frames(&self, n: usize, rate: u32) -> usize {
        let (len, shift) = self.frame_samples(rate);
        if n < len {
            0
        } else {
            (n - len) / shift + 1
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters over FFT bins `0..=n_fft/2`, band edges linearly
/// spaced on the mel scale from 0 Hz to Nyquist.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `(first bin, weights)` per band.
    bands: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, rate: u32) -> Self {
        let nyquist = rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = rate as f64 / n_fft as f64;
        let bands = (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut first = None;
                let mut weights = Vec::new();
                for k in 0..=n_fft / 2 {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first.get_or_insert(k);
                        weights.push(w);
                    } else if first.is_some() {
                        break;
                    }
                }
                (first.unwrap_or(0), weights)
            })
            .collect();
        MelFilterbank {
            bands,
            centers_hz: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply(&self, spectrum: &[f64]) -> Vec<f64> {
        self.bands
            .iter()
            .map(|(first, w)| w.iter().zip(&spectrum[*first..]).map(|(a, b)| a * b).sum())
            .collect()
    }
}

struct Analyzer {
    frame_len: usize,
    shift: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    n_fft: usize,
    bank: MelFilterbank,
}

impl Analyzer {
    fn new(cfg: &FeatureConfig, rate: u32) -> Self {
        let (frame_len, shift) = cfg.frame_samples(rate);
        let n_fft = frame_len.next_power_of_two();
        let window = (0..frame_len)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (frame_len - 1) as f64).cos()
            })
            .collect();
        Analyzer {
            frame_len,
            shift,
            window,
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            n_fft,
            bank: MelFilterbank::new(cfg.n_mels, n_fft, rate),
        }
    }
}

/// Log-mel filterbank energies, `n_mels × T₁₀ₘₛ`.
pub fn log_mel(w: &Waveform, cfg: &FeatureConfig) -> Result<Tensor> {
    let a = Analyzer::new(cfg, w.sample_rate);
    let frames = cfg.num_frames(w.samples.len(), w.sample_rate);
    if frames == 0 {
        return Err(Error::Data(format!(
            "waveform of {} samples is shorter than one {}-sample frame",
            w.samples.len(),
            a.frame_len
        )));
    }
    let mut out = Tensor::zeros(&[cfg.n_mels, frames]);
    let mut buf = vec![Complex::new(0.0, 0.0); a.n_fft];
    let mut mag = vec![0.0; a.n_fft / 2 + 1];
    for t in 0..frames {
        let start = t * a.shift;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < a.frame_len {
                Complex::new(w.samples[start + i] * a.window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        a.fft.process(&mut buf);
        for (m, b) in mag.iter_mut().zip(&buf) {
            *m = b.norm();
        }
        for (band, e) in a.bank.apply(&mag).into_iter().enumerate() {
            out.set(band, t, e.max(cfg.log_floor).ln());
        }
    }
    Ok(out)
}

fn context_frames(cfg: &FeatureConfig, frames: usize, center: usize) -> impl Iterator<Item = usize> {
    let c = cfg.context as isize;
    let last = frames as isize - 1;
    (-c..=c).map(move |o| (center as isize + o).clamp(0, last) as usize)
}

fn subsampled_len(frames: usize, cfg: &FeatureConfig) -> usize {
    frames.div_ceil(cfg.subsample)
}

/// Splices ±context frames (edges replicated) and keeps every
/// `subsample`-th frame: `n_mels·(2·context+1) × ceil(T/subsample)`.
pub fn splice_and_subsample(feats: &Tensor, cfg: &FeatureConfig) -> Result<Tensor> {
    let (bands, frames) = (feats.rows(), feats.cols());
    if bands != cfg.n_mels {
        return Err(shape_err!("expected {} bands, got {bands}", cfg.n_mels));
    }
    let out_frames = subsampled_len(frames, cfg);
    let mut out = Tensor::zeros(&[cfg.spliced_dim(), out_frames]);
    for k in 0..out_frames {
        for (j, src) in context_frames(cfg, frames, k * cfg.subsample).enumerate() {
            for b in 0..bands {
                out.set(j * bands + b, k, feats.get(b, src));
            }
        }
    }
    Ok(out)
}

/// Mean over the ±context window instead of concatenation, then the same
/// subsampling: `n_mels × ceil(T/subsample)`.
pub fn context_average(feats: &Tensor, cfg: &FeatureConfig) -> Result<Tensor> {
    let (bands, frames) = (feats.rows(), feats.cols());
    if bands != cfg.n_mels {
        return Err(shape_err!("expected {} bands, got {bands}", cfg.n_mels));
    }
    let out_frames = subsampled_len(frames, cfg);
    let width = (2 * cfg.context + 1) as f64;
    let mut out = Tensor::zeros(&[bands, out_frames]);
    for k in 0..out_frames {
        for src in context_frames(cfg, frames, k * cfg.subsample) {
            for b in 0..bands {
                let v = out.get(b, k) + feats.get(b, src) / width;
                out.set(b, k, v);
            }
        }
    }
    Ok(out)
}

/// Both 100 ms feature views of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelFeatures {
    /// `345 × T`.
    pub spliced: Tensor,
    /// `23 × T`.
    pub averaged: Tensor,
}

impl ChannelFeatures {
    pub fn extract(w: &Waveform, cfg: &FeatureConfig) -> Result<Self> {
        let lm = log_mel(w, cfg)?;
        Ok(ChannelFeatures {
            spliced: splice_and_subsample(&lm, cfg)?,
            averaged: context_average(&lm, cfg)?,
        })
    }

    pub fn frames(&self) -> usize {
        self.spliced.cols()
    }
}

/// Features of every channel of one session, equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionFeatures {
    pub channels: Vec<ChannelFeatures>,
}

impl SessionFeatures {
    /// Extracts per-channel features after truncating to the shortest channel.
    pub fn extract(channels: &[Waveform], cfg: &FeatureConfig) -> Result<Self> {
        let min_len = channels
            .iter()
            .map(|w| w.samples.len())
            .min()
            .ok_or_else(|| Error::Data("no channels".into()))?;
        let channels = channels
            .iter()
            .map(|w| {
                let w = Waveform {
                    samples: w.samples[..min_len].to_vec(),
                    sample_rate: w.sample_rate,
                };
                ChannelFeatures::extract(&w, cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SessionFeatures { channels })
    }

    pub fn frames(&self) -> usize {
        self.channels.first().map_or(0, ChannelFeatures::frames)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Model input built from the listed channels over a frame range.
    pub fn model_input(
        &self,
        variant: Variant,
        channel_ids: &[usize],
        frames: Range<usize>,
    ) -> Result<ModelInput> {
        if channel_ids.is_empty() {
            return Err(Error::Data("empty channel list".into()));
        }
        if frames.is_empty() || frames.end > self.frames() {
            return Err(Error::Data(format!(
                "frame range {frames:?} outside 0..{}",
                self.frames()
            )));
        }
        let mut chans = Vec::with_capacity(channel_ids.len());
        for &c in channel_ids {
            chans.push(self.channels.get(c).ok_or_else(|| {
                Error::Data(format!("channel {c} missing ({} available)", self.channels.len()))
            })?);
        }
        let cut = |t: &Tensor| -> Tensor {
            let rows = t.rows();
            let mut out = Tensor::zeros(&[rows, frames.len()]);
            for r in 0..rows {
                out.data_mut()[r * frames.len()..(r + 1) * frames.len()]
                    .copy_from_slice(&t.row(r)[frames.clone()]);
            }
            out
        };
        let spliced: Vec<Tensor> = chans.iter().map(|c| cut(&c.spliced)).collect();
        Ok(match variant {
            Variant::Transformer => ModelInput::Single(mean_tensor(&spliced)),
            Variant::SpatioTemporal => ModelInput::MultiChannel(spliced),
            Variant::CoAttention => ModelInput::CoAttention {
                averaged: mean_tensor(&spliced),
                channels: chans.iter().map(|c| cut(&c.averaged)).collect(),
            },
        })
    }
}

fn mean_tensor(ts: &[Tensor]) -> Tensor {
    let mut out = ts[0].clone();
    for t in &ts[1..] {
        for (a, b) in out.data_mut().iter_mut().zip(t.data()) {
            *a += b;
        }
    }
    let n = ts.len() as f64;
    out.data_mut().iter_mut().for_each(|a| *a /= n);
    out
}

/// Variant-specific model input.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput {
    /// Channel-averaged spliced features, `F × T`.
    Single(Tensor),
    /// Per-channel spliced features, `C` tensors of `F × T`.
    MultiChannel(Vec<Tensor>),
    /// Channel-averaged spliced features plus per-channel context averages.
    CoAttention {
        averaged: Tensor,
        channels: Vec<Tensor>,
    },
}

impl ModelInput {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelInput::Single(_) => "single-channel",
            ModelInput::MultiChannel(_) => "multi-channel",
            ModelInput::CoAttention { .. } => "co-attention",
        }
    }

    pub fn frames(&self) -> usize {
        match self {
            ModelInput::Single(x) => x.cols(),
            ModelInput::MultiChannel(xs) => xs.first().map_or(0, Tensor::cols),
            ModelInput::CoAttention { averaged, .. } => averaged.cols(),
        }
    }

    pub fn num_channels(&self) -> usize {
        match self {
            ModelInput::Single(_) => 1,
            ModelInput::MultiChannel(xs) => xs.len(),
            ModelInput::CoAttention { channels, .. } => channels.len(),
        }
    }

    /// Same input with channels reordered: entry `i` is old channel `order[i]`.
    pub fn reorder_channels(&self, order: &[usize]) -> ModelInput {
        match self {
            ModelInput::Single(x) => ModelInput::Single(x.clone()),
            ModelInput::MultiChannel(xs) => {
                ModelInput::MultiChannel(order.iter().map(|&i| xs[i].clone()).collect())
            }
            ModelInput::CoAttention { averaged, channels } => ModelInput::CoAttention {
                averaged: averaged.clone(),
                channels: order.iter().map(|&i| channels[i].clone()).collect(),
            },
        }
    }

    /// Checks dimensions against a model configuration.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let t = self.frames();
        let expect = |x: &Tensor, rows: usize| -> Result<()> {
            if x.ndim() != 2 || x.rows() != rows || x.cols() != t {
                return Err(shape_err!("input {:?}, expected [{rows}, {t}]", x.shape()));
            }
            Ok(())
        };
        match self {
            ModelInput::Single(x) => expect(x, config.input_dim),
            ModelInput::MultiChannel(xs) => {
                if xs.is_empty() {
                    return Err(Error::Data("empty channel list".into()));
                }
                xs.iter().try_for_each(|x| expect(x, config.input_dim))
            }
            ModelInput::CoAttention { averaged, channels } => {
                if channels.is_empty() {
                    return Err(Error::Data("empty channel list".into()));
                }
                expect(averaged, config.input_dim)?;
                channels.iter().try_for_each(|x| expect(x, config.multi_input_dim))
            }
        }
    }
}

/// Features for `variant` from raw channels (all channels used).
pub fn assemble_model_input(
    channels: &[Waveform],
    variant: Variant,
    cfg: &FeatureConfig,
) -> Result<ModelInput> {
    if channels.is_empty() {
        return Err(Error::Data("empty channel list".into()));
    }
    let feats = SessionFeatures::extract(channels, cfg)?;
    let ids: Vec<usize> = (0..channels.len()).collect();
    feats.model_input(variant, &ids, 0..feats.frames())
}

/// Reads a mono 16-bit PCM WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Data(format!(
            "{}: expected mono 16-bit PCM, found {} channel(s) of {}-bit {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Waveform::new(samples, spec.sample_rate).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes a mono 16-bit PCM WAV file; samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

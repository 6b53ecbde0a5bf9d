//! Synthetic distributed-microphone conversations.
//!
//! Speakers are noise sources shaped by a per-voice spectral envelope,
//! rendered to each microphone through free-field propagation: a
//! fractional delay of `distance / c` and a gain of `1 / distance`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_wav, write_wav, Waveform};
use crate::scoring::{read_rttm, speaker_label, write_rttm, Segment};
use crate::tensor::Tensor;

pub const SPEED_OF_SOUND: f64 = 343.0;

pub type Point = [f64; 3];

fn dist(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomLayout {
    pub speakers: Vec<Point>,
    pub mics: Vec<Point>,
    pub speed_of_sound: f64,
}

impl RoomLayout {
    pub fn new(speakers: Vec<Point>, mics: Vec<Point>) -> Result<Self> {
        let l = RoomLayout {
            speakers,
            mics,
            speed_of_sound: SPEED_OF_SOUND,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mics.is_empty() || self.speakers.is_empty() {
            return Err(Error::Config("layout needs speakers and microphones".into()));
        }
        for (s, sp) in self.speakers.iter().enumerate() {
            for (c, m) in self.mics.iter().enumerate() {
                let d = dist(sp, m);
                if d <= 0.1 {
                    return Err(Error::Config(format!(
                        "speaker {s} is {d:.3} m from microphone {c}; at least 0.1 m required"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Microphones uniform on a disk at height 0, speakers on a circle
    /// around it with a minimum angular separation.
    pub fn sample(g: &Geometry, speakers: usize, mics: usize, rng: &mut impl Rng) -> Result<Self> {
        let mics = (0..mics)
            .map(|_| {
                let r = g.mic_radius * rng.gen::<f64>().sqrt();
                let a = rng.gen_range(0.0..2.0 * PI);
                [r * a.cos(), r * a.sin(), 0.0]
            })
            .collect();
        let min_sep = g.min_speaker_separation_deg.to_radians();
        let mut angles: Vec<f64> = Vec::new();
        for _ in 0..speakers {
            let mut a = rng.gen_range(0.0..2.0 * PI);
            for _ in 0..1000 {
                let ok = angles.iter().all(|b| {
                    let d = (a - b).rem_euclid(2.0 * PI);
                    d.min(2.0 * PI - d) >= min_sep
                });
                if ok {
                    break;
                }
                a = rng.gen_range(0.0..2.0 * PI);
            }
            angles.push(a);
        }
        let speakers = angles
            .iter()
            .map(|a| [g.speaker_radius * a.cos(), g.speaker_radius * a.sin(), g.speaker_height])
            .collect();
        RoomLayout::new(speakers, mics)
    }

    pub fn distance(&self, speaker: usize, mic: usize) -> f64 {
        dist(&self.speakers[speaker], &self.mics[mic])
    }

    /// Propagation delay in seconds.
    pub fn delay(&self, speaker: usize, mic: usize) -> f64 {
        self.distance(speaker, mic) / self.speed_of_sound
    }

    pub fn gain(&self, speaker: usize, mic: usize) -> f64 {
        1.0 / self.distance(speaker, mic)
    }
}

/// Places every speaker at the first speaker's position.
pub fn make_hybrid(layout: &RoomLayout) -> Result<RoomLayout> {
    if layout.speakers.len() != 2 {
        return Err(Error::Config(format!(
            "hybrid layouts need two speakers, got {}",
            layout.speakers.len()
        )));
    }
    let p = layout.speakers[0];
    Ok(RoomLayout {
        speakers: vec![p, p],
        ..layout.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Geometry {
    pub mic_radius: f64,
    pub speaker_radius: f64,
    pub speaker_height: f64,
    pub min_speaker_separation_deg: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            mic_radius: 1.0,
            speaker_radius: 2.0,
            speaker_height: 0.3,
            min_speaker_separation_deg: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionSpec {
    /// Seconds.
    pub duration: f64,
    pub speakers: usize,
    pub channels: usize,
    pub sample_rate: u32,
    pub utterance_min: f64,
    pub utterance_max: f64,
    pub pause_mean: f64,
    /// `None` disables additive noise.
    pub snr_db: Option<f64>,
    pub hybrid: bool,
    /// All speakers share one spectral envelope.
    pub identical_voice: bool,
    /// Per-utterance gain drawn uniformly from ±this many dB.
    pub gain_jitter_db: f64,
    /// Per-channel clock drift; empty means none.
    pub drift_ppm: Vec<f64>,
    pub geometry: Geometry,
    pub seed: u64,
}

impl Default for SessionSpec {
    fn default() -> Self {
        SessionSpec {
            duration: 60.0,
            speakers: 2,
            channels: 4,
            sample_rate: 8000,
            utterance_min: 1.0,
            utterance_max: 5.0,
            pause_mean: 2.0,
            snr_db: Some(20.0),
            hybrid: false,
            identical_voice: false,
            gain_jitter_db: 6.0,
            drift_ppm: Vec::new(),
            geometry: Geometry::default(),
            seed: 0,
        }
    }
}

impl SessionSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if self.speakers == 0 || self.channels == 0 {
            return bad("speakers and channels must be positive".into());
        }
        if self.sample_rate != 8000 && self.sample_rate != 16000 {
            return bad(format!("unsupported sample rate {}", self.sample_rate));
        }
        if !(self.utterance_min > 0.0 && self.utterance_max >= self.utterance_min) {
            return bad("utterance bounds must satisfy 0 < min <= max".into());
        }
        if !(self.pause_mean > 0.0) {
            return bad("pause mean must be positive".into());
        }
        if self.snr_db.is_some_and(|s| !s.is_finite()) {
            return bad("SNR must be finite".into());
        }
        if !self.drift_ppm.is_empty() && self.drift_ppm.len() != self.channels {
            return bad(format!(
                "{} drift values for {} channels",
                self.drift_ppm.len(),
                self.channels
            ));
        }
        if self.hybrid && self.speakers != 2 {
            return bad("hybrid sessions need two speakers".into());
        }
        Ok(())
    }

    fn drift(&self, channel: usize) -> f64 {
        self.drift_ppm.get(channel).copied().unwrap_or(0.0)
    }
}

/// Speech intervals per speaker, in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub duration: f64,
    pub intervals: Vec<Vec<(f64, f64)>>,
}

impl GroundTruth {
    /// Builds from reference segments; speakers ordered by label.
    pub fn from_segments(segments: &[Segment], duration: f64) -> Self {
        let mut names: Vec<&str> = segments.iter().map(|s| s.speaker.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        let intervals = names
            .iter()
            .map(|n| {
                let mut v: Vec<(f64, f64)> = segments
                    .iter()
                    .filter(|s| s.speaker == *n)
                    .map(|s| (s.onset, s.offset.min(duration)))
                    .collect();
                v.sort_by(|a, b| a.0.total_cmp(&b.0));
                v
            })
            .collect();
        GroundTruth {
            duration,
            intervals,
        }
    }

    pub fn speakers(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_active(&self, speaker: usize, t: f64) -> bool {
        self.intervals[speaker].iter().any(|&(on, off)| on <= t && t < off)
    }

    /// `S × frames` labels; frame `t` is active when its center
    /// `(t + 0.5)·period` lies inside an interval.
    pub fn labels(&self, frames: usize, period: f64) -> Tensor {
        let s = self.speakers();
        Tensor::from_fn(&[s, frames], |i| {
            let t = ((i % frames) as f64 + 0.5) * period;
            f64::from(u8::from(self.is_active(i / frames, t)))
        })
    }

    /// Overlapped speech over total speech time, on a 1 ms grid.
    pub fn overlap_ratio(&self) -> f64 {
        let steps = (self.duration * 1000.0).round() as usize;
        let (mut speech, mut overlap) = (0usize, 0usize);
        for k in 0..steps {
            let t = (k as f64 + 0.5) / 1000.0;
            let n = (0..self.speakers()).filter(|&s| self.is_active(s, t)).count();
            speech += usize::from(n > 0);
            overlap += usize::from(n > 1);
        }
        if speech == 0 {
            0.0
        } else {
            overlap as f64 / speech as f64
        }
    }

    pub fn segments(&self, session: &str) -> Vec<Segment> {
        let mut out = Vec::new();
        for (s, iv) in self.intervals.iter().enumerate() {
            for &(onset, offset) in iv {
                out.push(Segment {
                    session: session.into(),
                    speaker: speaker_label(s),
                    onset,
                    offset,
                });
            }
        }
        out
    }
}

fn ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

/// Each speaker alternates pauses (exponential) and utterances (uniform),
/// starting with a pause. Times are rounded to 1 ms.
pub fn sample_dialog(spec: &SessionSpec, rng: &mut impl Rng) -> Result<GroundTruth> {
    spec.validate()?;
    let pause = Exp::new(1.0 / spec.pause_mean).map_err(|e| Error::Config(e.to_string()))?;
    let intervals = (0..spec.speakers)
        .map(|_| {
            let mut v = Vec::new();
            let mut t = ms(pause.sample(rng));
            while t < spec.duration {
                let len = rng.gen_range(spec.utterance_min..=spec.utterance_max);
                let end = ms((t + len).min(spec.duration));
                if end > t {
                    v.push((t, end));
                }
                t = ms(end + pause.sample(rng));
            }
            v
        })
        .collect();
    Ok(GroundTruth {
        duration: spec.duration,
        intervals,
    })
}

const VOICE_TAPS: usize = 256;

/// Linear-phase FIR filter realizing a random smooth spectral envelope.
#[derive(Clone, Debug, PartialEq)]
pub struct Voice {
    pub envelope: Vec<f64>,
    pub taps: Vec<f64>,
}

impl Voice {
    /// Envelope over `VOICE_TAPS/2 + 1` bins from 0 to Nyquist: a few
    /// Gaussian resonances over a small floor.
    pub fn from_seed(voice_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(voice_seed);
        let bins = VOICE_TAPS / 2 + 1;
        let formants: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| (rng.gen_range(0.03..0.9), rng.gen_range(0.02..0.08), rng.gen_range(0.2..1.0)))
            .collect();
        let envelope: Vec<f64> = (0..bins)
            .map(|k| {
                let f = k as f64 / (bins - 1) as f64;
                0.02 + formants
                    .iter()
                    .map(|(c, w, g)| g * (-(f - c).powi(2) / (2.0 * w * w)).exp())
                    .sum::<f64>()
            })
            .collect();
        let mut spec: Vec<Complex<f64>> = (0..VOICE_TAPS)
            .map(|k| Complex::new(envelope[k.min(VOICE_TAPS - k)], 0.0))
            .collect();
        FftPlanner::new().plan_fft_inverse(VOICE_TAPS).process(&mut spec);
        let half = VOICE_TAPS / 2;
        let mut taps: Vec<f64> = (0..VOICE_TAPS)
            .map(|n| {
                let w = 0.5 - 0.5 * (2.0 * PI * n as f64 / VOICE_TAPS as f64).cos();
                spec[(n + half) % VOICE_TAPS].re * w
            })
            .collect();
        let energy = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
        taps.iter_mut().for_each(|t| *t /= energy);
        Voice { envelope, taps }
    }

    fn filter(&self, x: &[f64]) -> Vec<f64> {
        let n = self.taps.len();
        (0..x.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(n);
                (lo..=i).map(|j| self.taps[i - j] * x[j]).sum()
            })
            .collect()
    }
}

/// RMS of a speech signal before per-utterance gain and propagation.
pub const SPEECH_RMS: f64 = 0.05;

/// Shaped noise inside `intervals`, exact zeros elsewhere. Each utterance
/// gets a syllable-rate amplitude modulation and a random gain.
pub fn synth_speaker_signal(
    intervals: &[(f64, f64)],
    duration: f64,
    voice: &Voice,
    rate: u32,
    gain_jitter_db: f64,
    rng: &mut impl Rng,
) -> Waveform {
    let n = (duration * rate as f64).round() as usize;
    let mut out = vec![0.0; n];
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for &(on, off) in intervals {
        let (a, b) = ((on * rate as f64).round() as usize, ((off * rate as f64).round() as usize).min(n));
        if a >= b {
            continue;
        }
        let pad = voice.taps.len();
        let excitation: Vec<f64> = (0..b - a + pad).map(|_| normal.sample(rng)).collect();
        let shaped = voice.filter(&excitation);
        let gain = SPEECH_RMS * 10f64.powf(rng.gen_range(-gain_jitter_db..=gain_jitter_db) / 20.0);
        let (mod_hz, phase) = (rng.gen_range(3.0..6.0), rng.gen_range(0.0..2.0 * PI));
        for (k, slot) in out[a..b].iter_mut().enumerate() {
            let t = k as f64 / rate as f64;
            let am = 0.6 + 0.4 * (2.0 * PI * mod_hz * t + phase).sin();
            *slot = gain * am * shaped[k + pad];
        }
    }
    // Waveform::new rejects only empty input and odd rates.
    Waveform {
        samples: out,
        sample_rate: rate,
    }
}

fn interpolate(x: &[f64], pos: f64) -> f64 {
    if pos < 0.0 {
        return 0.0;
    }
    let i = pos.floor() as usize;
    if i + 1 >= x.len() {
        return if i + 1 == x.len() && pos == i as f64 { x[i] } else { 0.0 };
    }
    let frac = pos - i as f64;
    x[i] * (1.0 - frac) + x[i + 1] * frac
}

/// Renders every microphone channel. Noise is white Gaussian scaled to
/// `snr_db` below the channel's mixed speech power.
pub fn render_channels(
    signals: &[Waveform],
    layout: &RoomLayout,
    spec: &SessionSpec,
    rng: &mut impl Rng,
) -> Result<Vec<Waveform>> {
    layout.validate()?;
    if signals.len() != layout.speakers.len() {
        return Err(Error::Config(format!(
            "{} signals for {} speakers",
            signals.len(),
            layout.speakers.len()
        )));
    }
    let rate = signals[0].sample_rate;
    let n = signals.iter().map(|s| s.samples.len()).max().unwrap_or(0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(layout.mics.len());
    for c in 0..layout.mics.len() {
        let stretch = 1.0 + spec.drift(c) * 1e-6;
        let mut y = vec![0.0; n];
        for (s, sig) in signals.iter().enumerate() {
            let delay = layout.delay(s, c) * rate as f64;
            let g = layout.gain(s, c);
            for (k, v) in y.iter_mut().enumerate() {
                *v += g * interpolate(&sig.samples, k as f64 * stretch - delay);
            }
        }
        if let Some(snr) = spec.snr_db {
            let power = y.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
            let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
            for v in &mut y {
                *v += sigma * normal.sample(rng);
            }
        }
        out.push(Waveform {
            samples: y,
            sample_rate: rate,
        });
    }
    Ok(out)
}

/// One simulated session held in memory.
#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub spec: SessionSpec,
    pub layout: RoomLayout,
    pub truth: GroundTruth,
    pub voice_seeds: Vec<u64>,
    pub channels: Vec<Waveform>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub spec: SessionSpec,
    pub layout: RoomLayout,
    pub voice_seeds: Vec<u64>,
    pub intervals: Vec<Vec<(f64, f64)>>,
    pub overlap_ratio: f64,
}

const STREAM_LAYOUT: u64 = 1;
const STREAM_DIALOG: u64 = 2;
const STREAM_VOICE: u64 = 3;
const STREAM_EXCITATION: u64 = 4;
const STREAM_NOISE: u64 = 5;

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

/// Generates a full session from `spec` (including its seed). Channels are
/// jointly scaled down if any sample would exceed 0.9 in magnitude.
pub fn simulate_session(id: &str, spec: &SessionSpec) -> Result<Session> {
    spec.validate()?;
    let mut layout = RoomLayout::sample(
        &spec.geometry,
        spec.speakers,
        spec.channels,
        &mut stream(spec.seed, STREAM_LAYOUT),
    )?;
    if spec.hybrid {
        layout = make_hybrid(&layout)?;
    }
    let truth = sample_dialog(spec, &mut stream(spec.seed, STREAM_DIALOG))?;
    let mut vr = stream(spec.seed, STREAM_VOICE);
    let first: u64 = vr.gen();
    let voice_seeds: Vec<u64> = (0..spec.speakers)
        .map(|s| if spec.identical_voice || s == 0 { first } else { vr.gen() })
        .collect();
    let mut er = stream(spec.seed, STREAM_EXCITATION);
    let signals: Vec<Waveform> = truth
        .intervals
        .iter()
        .zip(&voice_seeds)
        .map(|(iv, &vs)| {
            synth_speaker_signal(iv, spec.duration, &Voice::from_seed(vs), spec.sample_rate, spec.gain_jitter_db, &mut er)
        })
        .collect();
    let mut channels = render_channels(&signals, &layout, spec, &mut stream(spec.seed, STREAM_NOISE))?;
    let peak = channels
        .iter()
        .flat_map(|c| c.samples.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.9 {
        let k = 0.9 / peak;
        for c in &mut channels {
            c.samples.iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(Session {
        id: id.into(),
        spec: spec.clone(),
        layout,
        truth,
        voice_seeds,
        channels,
    })
}

pub fn channel_file(c: usize) -> String {
    format!("ch{c:02}.wav")
}

pub const REFERENCE_FILE: &str = "ref.rttm";
pub const META_FILE: &str = "meta.json";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

impl Session {
    pub fn meta(&self) -> SessionMeta {
        SessionMeta {
            id: self.id.clone(),
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            voice_seeds: self.voice_seeds.clone(),
            intervals: self.truth.intervals.clone(),
            overlap_ratio: self.truth.overlap_ratio(),
        }
    }

    /// Writes `dir/ch00.wav…`, `dir/ref.rttm` and `dir/meta.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (c, w) in self.channels.iter().enumerate() {
            write_wav(&dir.join(channel_file(c)), w)?;
        }
        write_rttm(&dir.join(REFERENCE_FILE), &self.truth.segments(&self.id))?;
        write_json(&dir.join(META_FILE), &self.meta())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub dir: PathBuf,
    pub channels: usize,
    pub duration: f64,
    pub overlap_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub sessions: Vec<ManifestEntry>,
    pub mean_overlap_ratio: f64,
}

impl Manifest {
    pub fn new(sessions: Vec<ManifestEntry>) -> Self {
        let mean_overlap_ratio = if sessions.is_empty() {
            0.0
        } else {
            sessions.iter().map(|s| s.overlap_ratio).sum::<f64>() / sessions.len() as f64
        };
        Manifest {
            sessions,
            mean_overlap_ratio,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Derives the seed of session `index` from a dataset seed.
pub fn session_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut r = stream(dataset_seed, 1000 + index as u64);
    r.gen()
}

/// Simulates `count` sessions into `out/<id>/` and writes the manifest.
pub fn simulate_dataset(out: &Path, spec: &SessionSpec, count: usize, prefix: &str) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{prefix}{i:04}");
        let s = SessionSpec {
            seed: session_seed(spec.seed, i),
            ..spec.clone()
        };
        let session = simulate_session(&id, &s)?;
        session.write(&out.join(&id))?;
        entries.push(ManifestEntry {
            dir: PathBuf::from(&id),
            channels: session.channels.len(),
            duration: spec.duration,
            overlap_ratio: session.truth.overlap_ratio(),
            id,
        });
    }
    let m = Manifest::new(entries);
    m.write(out)?;
    Ok(m)
}

/// Channels and reference of a session directory.
pub fn load_session(dir: &Path, channels: usize) -> Result<(Vec<Waveform>, Vec<Segment>)> {
    let wavs = (0..channels)
        .map(|c| read_wav(&dir.join(channel_file(c))))
        .collect::<Result<Vec<_>>>()?;
    let reference = read_rttm(&dir.join(REFERENCE_FILE))?;
    Ok((wavs, reference))
}

//! Posterior post-processing, frame-based DER and RTTM files.
//!
//! DER is counted on a 10 ms grid. Frame `i` covers `[0.01·i, 0.01·(i+1))`
//! and is active for a segment when its center lies in `[onset, offset)`.
//! Frames whose center is closer than the collar to any reference boundary
//! are not scored.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::pit::{best_permutation_by_correlation, permutations, permute_rows, MAX_SPEAKERS};
use crate::tensor::Tensor;

/// Scoring resolution in seconds.
pub const SCORING_STEP: f64 = 0.01;

/// Posterior post-processing and scoring settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub threshold: f64,
    /// Odd; 1 disables the filter.
    pub median_window: usize,
    /// Seconds excluded on each side of every reference boundary.
    pub collar: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            threshold: 0.5,
            median_window: 11,
            collar: 0.25,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.median_window % 2 == 0 {
            return Err(Error::Config(format!("median window {} must be odd", self.median_window)));
        }
        if !(self.collar >= 0.0 && self.collar.is_finite()) {
            return Err(Error::Config(format!("collar {} must be non-negative", self.collar)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub session: String,
    pub speaker: String,
    pub onset: f64,
    pub offset: f64,
}

impl Segment {
    pub fn new(session: &str, speaker: &str, onset: f64, offset: f64) -> Result<Self> {
        if !(onset >= 0.0 && onset < offset && offset.is_finite()) {
            return Err(Error::Data(format!("bad segment [{onset}, {offset})")));
        }
        Ok(Segment {
            session: session.into(),
            speaker: speaker.into(),
            onset,
            offset,
        })
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// Label used for hypothesis speaker `s`.
pub fn speaker_label(s: usize) -> String {
    format!("spk{s}")
}

fn median_filter(active: &[bool], window: usize) -> Vec<bool> {
    let half = window / 2;
    let n = active.len();
    (0..n)
        .map(|t| {
            let count = (0..window)
                .filter(|&k| active[(t + k).saturating_sub(half).min(n - 1)])
                .count();
            2 * count > window
        })
        .collect()
}

/// Thresholds each speaker's posteriors, optionally median-filters them
/// (window 1 disables the filter) and merges active runs into segments.
pub fn posteriors_to_segments(
    session: &str,
    y: &Tensor,
    threshold: f64,
    median_window: usize,
    frame_period: f64,
) -> Result<Vec<Segment>> {
    if median_window % 2 == 0 {
        return Err(Error::Config(format!("median window {median_window} must be odd")));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut out = Vec::new();
    for s in 0..y.rows() {
        let active: Vec<bool> = y.row(s).iter().map(|&p| p > threshold).collect();
        let active = if median_window > 1 {
            median_filter(&active, median_window)
        } else {
            active
        };
        let mut start = None;
        for (t, &a) in active.iter().chain([&false]).enumerate() {
            match (a, start) {
                (true, None) => start = Some(t),
                (false, Some(t0)) => {
                    out.push(Segment::new(
                        session,
                        &speaker_label(s),
                        t0 as f64 * frame_period,
                        t as f64 * frame_period,
                    )?);
                    start = None;
                }
                _ => {}
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DerBreakdown {
    pub missed: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    pub scored_speech: f64,
    pub der: f64,
}

impl DerBreakdown {
    fn from_frames(missed: usize, fa: usize, conf: usize, speech: usize) -> Self {
        let mut b = DerBreakdown {
            missed: missed as f64 * SCORING_STEP,
            false_alarm: fa as f64 * SCORING_STEP,
            confusion: conf as f64 * SCORING_STEP,
            scored_speech: speech as f64 * SCORING_STEP,
            der: 0.0,
        };
        b.der = b.ratio();
        b
    }

    pub fn errors(&self) -> f64 {
        self.missed + self.false_alarm + self.confusion
    }

    /// Error over scored speech; 1 when errors occur without reference
    /// speech, 0 when there is neither.
    fn ratio(&self) -> f64 {
        if self.scored_speech > 0.0 {
            self.errors() / self.scored_speech
        } else if self.errors() > 0.0 {
            1.0
        } else {
            0.0
        }
    }

    /// Time-weighted sum of several breakdowns.
    pub fn total<'a>(parts: impl IntoIterator<Item = &'a DerBreakdown>) -> DerBreakdown {
        let mut b = DerBreakdown::default();
        for p in parts {
            b.missed += p.missed;
            b.false_alarm += p.false_alarm;
            b.confusion += p.confusion;
            b.scored_speech += p.scored_speech;
        }
        b.der = b.ratio();
        b
    }
}

fn frame_of(t: f64) -> usize {
    (t / SCORING_STEP).round() as usize
}

/// Per-speaker activity on the 10 ms grid over `frames` frames.
fn activity(segs: &[Segment], frames: usize) -> (Vec<String>, Vec<Vec<bool>>) {
    let mut names: Vec<String> = segs.iter().map(|s| s.speaker.clone()).collect();
    names.sort();
    names.dedup();
    let mut act = vec![vec![false; frames]; names.len()];
    for seg in segs {
        let k = names.binary_search(&seg.speaker).expect("speaker listed");
        for (i, a) in act[k].iter_mut().enumerate() {
            let center = (i as f64 + 0.5) * SCORING_STEP;
            if center >= seg.onset && center < seg.offset {
                *a = true;
            }
        }
    }
    (names, act)
}

/// Frame-based DER with an optimal one-to-one speaker mapping.
pub fn der(reference: &[Segment], hypothesis: &[Segment], collar: f64) -> Result<DerBreakdown> {
    let end = reference
        .iter()
        .chain(hypothesis)
        .map(|s| s.offset)
        .fold(0.0, f64::max);
    let frames = frame_of(end) + 1;
    let (_, r) = activity(reference, frames);
    let (_, h) = activity(hypothesis, frames);
    let n = r.len().max(h.len());
    if n > MAX_SPEAKERS {
        return Err(Error::Data(format!("{n} speakers exceed the mapping limit of {MAX_SPEAKERS}")));
    }
    let mut scored = vec![true; frames];
    if collar > 0.0 {
        for seg in reference {
            for b in [seg.onset, seg.offset] {
                for (i, s) in scored.iter_mut().enumerate() {
                    if ((i as f64 + 0.5) * SCORING_STEP - b).abs() < collar {
                        *s = false;
                    }
                }
            }
        }
    }
    let (mut missed, mut fa, mut speech) = (0, 0, 0);
    let mut co = vec![vec![0usize; n]; n];
    let mut overlap_min = 0;
    for i in (0..frames).filter(|&i| scored[i]) {
        let nr = r.iter().filter(|a| a[i]).count();
        let nh = h.iter().filter(|a| a[i]).count();
        speech += nr;
        missed += nr.saturating_sub(nh);
        fa += nh.saturating_sub(nr);
        overlap_min += nr.min(nh);
        for (a, ra) in r.iter().enumerate() {
            for (b, hb) in h.iter().enumerate() {
                if ra[i] && hb[i] {
                    co[a][b] += 1;
                }
            }
        }
    }
    let correct = permutations(n)
        .iter()
        .map(|p| p.iter().enumerate().map(|(a, &b)| co[a][b]).sum::<usize>())
        .max()
        .unwrap_or(0);
    Ok(DerBreakdown::from_frames(missed, fa, overlap_min - correct, speech))
}

/// Aligns every channel's speaker order to the channel with the smallest
/// id, then averages. Input order does not matter.
pub fn average_posteriors_across_channels(ys: &[(usize, Tensor)]) -> Result<Tensor> {
    let mut sorted: Vec<&(usize, Tensor)> = ys.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let (_, reference) = sorted.first().ok_or_else(|| Error::Data("no channels".into()))?;
    let mut sum = Tensor::zeros(reference.shape());
    for (_, y) in &sorted {
        if y.shape() != reference.shape() {
            return Err(shape_err!("posteriors {:?} vs {:?}", y.shape(), reference.shape()));
        }
        let perm = best_permutation_by_correlation(reference, y)?;
        let aligned = permute_rows(y, &perm);
        for (a, b) in sum.data_mut().iter_mut().zip(aligned.data()) {
            *a += b;
        }
    }
    let n = sorted.len() as f64;
    sum.data_mut().iter_mut().for_each(|v| *v /= n);
    Ok(sum)
}

pub fn format_rttm(segments: &[Segment]) -> String {
    let mut out = String::new();
    for s in segments {
        writeln!(
            out,
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            s.session,
            s.onset,
            s.duration(),
            s.speaker
        )
        .expect("write to string");
    }
    out
}

pub fn parse_rttm(text: &str, path: &Path) -> Result<Vec<Segment>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 10 {
            return Err(err(n, format!("expected 10 fields, found {}", f.len())));
        }
        if f[0] != "SPEAKER" {
            return Err(err(n, format!("unsupported record type {:?}", f[0])));
        }
        let num = |s: &str, what: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(n, format!("bad {what} {s:?}")))
        };
        let onset = num(f[3], "onset")?;
        let dur = num(f[4], "duration")?;
        if onset < 0.0 || dur <= 0.0 {
            return Err(err(n, format!("empty or negative segment {onset} + {dur}")));
        }
        out.push(Segment {
            session: f[1].into(),
            speaker: f[7].into(),
            onset,
            offset: onset + dur,
        });
    }
    Ok(out)
}

pub fn read_rttm(path: &Path) -> Result<Vec<Segment>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rttm(&text, path)
}

pub fn write_rttm(path: &Path, segments: &[Segment]) -> Result<()> {
    std::fs::write(path, format_rttm(segments)).map_err(|e| Error::io(path, e))
}

/// Posterior dump: `S` and `T` as little-endian `u32`, then `S·T`
/// little-endian `f32` values, row-major.
pub fn write_posteriors(path: &Path, y: &Tensor) -> Result<()> {
    if y.ndim() != 2 {
        return Err(shape_err!("posteriors must be 2-D, got {:?}", y.shape()));
    }
    let mut bytes = Vec::with_capacity(8 + 4 * y.numel());
    for d in [y.rows(), y.cols()] {
        let d = u32::try_from(d).map_err(|_| shape_err!("dimension {d} too large"))?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for &v in y.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_posteriors(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| b.try_into().expect("4 bytes"))
            .ok_or_else(|| bad("truncated header"))
    };
    let (s, t) = (u32::from_le_bytes(word(0)?) as usize, u32::from_le_bytes(word(1)?) as usize);
    if bytes.len() != 8 + 4 * s * t {
        return Err(bad(&format!("expected {} bytes for {s}x{t}, found {}", 8 + 4 * s * t, bytes.len())));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(vec![s, t], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub session: String,
    #[serde(flatten)]
    pub breakdown: DerBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub collar: f64,
    pub sessions: Vec<SessionScore>,
    pub aggregate: DerBreakdown,
}

impl ScoreReport {
    pub fn new(collar: f64, sessions: Vec<SessionScore>) -> Self {
        let aggregate = DerBreakdown::total(sessions.iter().map(|s| &s.breakdown));
        ScoreReport {
            collar,
            sessions,
            aggregate,
        }
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, name: &str, b: &DerBreakdown| {
            writeln!(
                out,
                "{name:<24} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>7.2}%",
                b.scored_speech,
                b.missed,
                b.false_alarm,
                b.confusion,
                100.0 * b.der
            )
            .expect("write to string");
        };
        writeln!(
            out,
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "session", "speech", "miss", "fa", "conf", "DER"
        )
        .expect("write to string");
        for s in &self.sessions {
            row(&mut out, &s.session, &s.breakdown);
        }
        row(&mut out, "ALL", &self.aggregate);
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::testutil::rng;


    #[test]
    fn posterior_dump_round_trip() {
        let y = Tensor::from_fn(&[2, 5], |i| i as f64 / 16.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.post");
        write_posteriors(&p, &y).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 5, 0, 0, 0]);
        assert_eq!(bytes.len(), 8 + 40);
        assert_eq!(read_posteriors(&p).unwrap(), y);
        std::fs::write(&p, &bytes[..20]).unwrap();
        assert!(read_posteriors(&p).is_err());
    }

    fn seg(spk: &str, on: f64, off: f64) -> Segment {
        Segment::new("s1", spk, on, off).unwrap()
    }

    /// Independent oracle: integer millisecond clock, explicit per-frame
    /// recount for every candidate mapping.
    fn der_oracle(r: &[Segment], h: &[Segment], collar: f64) -> DerBreakdown {
        let ms = |t: f64| (t * 1000.0).round() as i64;
        let end = r.iter().chain(h).map(|s| ms(s.offset)).max().unwrap_or(0);
        let frames = end / 10 + 1;
        let speakers = |segs: &[Segment]| {
            let mut v: Vec<String> = segs.iter().map(|s| s.speaker.clone()).collect();
            v.sort();
            v.dedup();
            v
        };
        let (rs, hs) = (speakers(r), speakers(h));
        // Centers at 10·i + 5 ms.
        let on = |segs: &[Segment], spk: &str, i: i64| {
            segs.iter().any(|s| s.speaker == spk && ms(s.onset) <= 10 * i + 5 && 10 * i + 5 < ms(s.offset))
        };
        let collar_ms = (collar * 1000.0).round() as i64;
        let excluded = |i: i64| {
            r.iter().any(|s| {
                [ms(s.onset), ms(s.offset)].iter().any(|b| (10 * i + 5 - b).abs() < collar_ms)
            })
        };
        let n = rs.len().max(hs.len());
        let mut best: Option<(usize, usize, usize, usize)> = None;
        for perm in permutations(n) {
            let (mut m, mut f, mut c, mut sp) = (0, 0, 0, 0);
            for i in (0..frames).filter(|&i| !excluded(i)) {
                let ra: Vec<usize> = (0..rs.len()).filter(|&k| on(r, &rs[k], i)).collect();
                let ha: Vec<usize> = (0..hs.len()).filter(|&k| on(h, &hs[k], i)).collect();
                let correct = ra.iter().filter(|&&k| perm[k] < hs.len() && ha.contains(&perm[k])).count();
                sp += ra.len();
                m += ra.len().saturating_sub(ha.len());
                f += ha.len().saturating_sub(ra.len());
                c += ra.len().min(ha.len()) - correct;
            }
            if best.is_none_or(|b| m + f + c < b.0 + b.1 + b.2) {
                best = Some((m, f, c, sp));
            }
        }
        let (m, f, c, sp) = best.unwrap();
        DerBreakdown::from_frames(m, f, c, sp)
    }

    fn random_segments(r: &mut impl Rng, speakers: usize, prefix: &str) -> Vec<Segment> {
        let mut out = Vec::new();
        for s in 0..speakers {
            let mut t = r.gen_range(0..100) as f64 * 0.01;
            for _ in 0..r.gen_range(0..4) {
                let d = r.gen_range(1..150) as f64 * 0.01;
                out.push(seg(&format!("{prefix}{s}"), t, t + d));
                t += d + r.gen_range(1..100) as f64 * 0.01;
            }
        }
        out
    }

    #[test]
    fn segments_from_posteriors() {
        let y = Tensor::full(&[2, 10], 0.9);
        let segs = posteriors_to_segments("s", &y, 0.5, 1, 0.1).unwrap();
        assert_eq!(segs.len(), 2);
        for s in &segs {
            assert_eq!((s.onset, s.offset), (0.0, 1.0));
        }
        assert!(posteriors_to_segments("s", &Tensor::full(&[2, 10], 0.1), 0.5, 1, 0.1)
            .unwrap()
            .is_empty());
        let mut spike = Tensor::full(&[1, 9], 0.1);
        spike.set(0, 4, 0.9);
        assert_eq!(posteriors_to_segments("s", &spike, 0.5, 1, 0.1).unwrap().len(), 1);
        assert!(posteriors_to_segments("s", &spike, 0.5, 3, 0.1).unwrap().is_empty());
        assert!(posteriors_to_segments("s", &spike, 0.5, 4, 0.1).is_err());

        let y = Tensor::from_rows(&[[0.1, 0.9, 0.9, 0.1, 0.8]]).unwrap();
        let segs = posteriors_to_segments("s", &y, 0.5, 1, 0.1).unwrap();
        let spans: Vec<(f64, f64)> = segs.iter().map(|s| (s.onset, s.offset)).collect();
        assert_eq!(spans, [(0.1, 0.30000000000000004), (0.4, 0.5)]);
    }

    #[test]
    fn der_hand_cases() {
        let r = [seg("A", 0.0, 1.0)];
        let h = [seg("x", 0.0, 0.5)];
        let b = der(&r, &h, 0.25).unwrap();
        assert!((b.der - 0.5).abs() < 1e-12);
        assert!((b.missed - 0.25).abs() < 1e-12 && (b.scored_speech - 0.5).abs() < 1e-12);
        assert_eq!(b, der_oracle(&r, &h, 0.25));

        assert_eq!(der(&r, &r, 0.25).unwrap().der, 0.0);
        assert_eq!(der(&r, &[], 0.0).unwrap().der, 1.0);

        // Two reference speakers, one correct hypothesis: one miss per frame.
        let r = [seg("A", 0.0, 1.0), seg("B", 0.0, 1.0)];
        let b = der(&r, &[seg("x", 0.0, 1.0)], 0.0).unwrap();
        assert!((b.missed - 1.0).abs() < 1e-12 && b.confusion == 0.0);
        assert!((b.der - 0.5).abs() < 1e-12);
    }

    #[test]
    fn der_matches_frame_counting_oracle() {
        let mut r = rng(5);
        for case in 0..50 {
            let refs = random_segments(&mut r, 2, "ref");
            let n = r.gen_range(1..4);
            let hyps = random_segments(&mut r, n, "hyp");
            let collar = [0.0, 0.1, 0.25][case % 3];
            assert_eq!(der(&refs, &hyps, collar).unwrap(), der_oracle(&refs, &hyps, collar), "case {case}");
        }
    }

    #[test]
    fn averaging_cases() {
        let mut r = rng(1);
        let y = Tensor::from_fn(&[2, 12], |_| r.gen_range(0.0..1.0));
        let same = average_posteriors_across_channels(&[(0, y.clone()), (1, y.clone())]).unwrap();
        assert!(same.max_abs_diff(&y) < 1e-15);
        let swapped = permute_rows(&y, &[1, 0]);
        let avg = average_posteriors_across_channels(&[(0, y.clone()), (1, swapped)]).unwrap();
        assert!(avg.max_abs_diff(&y) < 1e-15);
        assert!(average_posteriors_across_channels(&[]).is_err());
        let bad = [(0, y.clone()), (1, Tensor::zeros(&[2, 3]))];
        assert!(average_posteriors_across_channels(&bad).is_err());
    }

    #[test]
    fn averaging_matches_brute_force_alignment() {
        let mut r = rng(2);
        for _ in 0..10 {
            let ys: Vec<(usize, Tensor)> = (0..3)
                .map(|c| (c, Tensor::from_fn(&[2, 15], |_| r.gen_range(0.0..1.0))))
                .collect();
            let corr = |a: &[f64], b: &[f64]| {
                let n = a.len() as f64;
                let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
                let c: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
                let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
                let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
                c / (va * vb).sqrt()
            };
            let base = &ys[0].1;
            let mut want = Tensor::zeros(&[2, 15]);
            for (_, y) in &ys {
                let keep = corr(base.row(0), y.row(0)) + corr(base.row(1), y.row(1));
                let swap = corr(base.row(0), y.row(1)) + corr(base.row(1), y.row(0));
                let order = if swap > keep { [1, 0] } else { [0, 1] };
                for s in 0..2 {
                    for t in 0..15 {
                        let v = want.get(s, t) + y.get(order[s], t) / 3.0;
                        want.set(s, t, v);
                    }
                }
            }
            let got = average_posteriors_across_channels(&ys).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-15);
            let reversed: Vec<(usize, Tensor)> = ys.iter().rev().cloned().collect();
            assert_eq!(average_posteriors_across_channels(&reversed).unwrap(), got);
        }
    }

    #[test]
    fn rttm_round_trip_and_errors() {
        let mut r = rng(3);
        let segs: Vec<Segment> = (0..20)
            .map(|i| {
                let on = r.gen_range(0.0..100.0);
                seg(&format!("spk{}", i % 2), on, on + r.gen_range(0.01..5.0))
            })
            .collect();
        let text = format_rttm(&segs);
        let back = parse_rttm(&text, Path::new("x.rttm")).unwrap();
        assert_eq!(back.len(), segs.len());
        for (a, b) in segs.iter().zip(&back) {
            assert_eq!((&a.session, &a.speaker), (&b.session, &b.speaker));
            assert!((a.onset - b.onset).abs() <= 5e-4 + 1e-12);
            assert!((a.offset - b.offset).abs() <= 1e-3 + 1e-12);
        }
        assert_eq!(format_rttm(&back), text);

        let bad = "SPEAKER s1 1 0.000 1.000 <NA> <NA> spk0 <NA> <NA>\nSPEAKER s1 1 0.000 1.000 <NA> <NA> spk0 <NA>\n";
        match parse_rttm(bad, Path::new("bad.rttm")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let bad = "SPEAKER s1 1 x 1.000 <NA> <NA> spk0 <NA> <NA>";
        assert!(parse_rttm(bad, Path::new("bad.rttm")).is_err());
    }

    #[test]
    fn report_aggregate_is_time_weighted() {
        let a = DerBreakdown::from_frames(10, 0, 0, 100);
        let b = DerBreakdown::from_frames(0, 30, 10, 300);
        let rep = ScoreReport::new(0.25, vec![
            SessionScore { session: "a".into(), breakdown: a },
            SessionScore { session: "b".into(), breakdown: b },
        ]);
        assert!((rep.aggregate.der - 50.0 / 400.0).abs() < 1e-12);
        assert!(rep.table().contains("ALL"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn der_invariants(seed in 0u64..100_000, collar in prop::sample::select(vec![0.0, 0.05, 0.25, 0.5])) {
            let mut r = rng(seed);
            let refs = random_segments(&mut r, 2, "ref");
            let hyps = random_segments(&mut r, 2, "hyp");
            prop_assert_eq!(der(&refs, &refs, collar).unwrap().der, 0.0);
            let renamed: Vec<Segment> = hyps
                .iter()
                .map(|s| Segment { speaker: format!("z{}", if s.speaker == "hyp0" { 1 } else { 0 }), ..s.clone() })
                .collect();
            prop_assert_eq!(der(&refs, &hyps, collar).unwrap(), der(&refs, &renamed, collar).unwrap());
        }
    }
}

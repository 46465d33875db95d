//! Ordered, non-iid segment streams: a synthetic generator with
//! boundary-free class transitions, a binary segment-file loader, and a
//! single-consumer cursor.
//!
//! The learner only ever sees [`Stream`] and [`Segment`]; true labels
//! and subject ids live in [`StreamMeta`] / [`LabeledDataset`], which
//! only evaluation code receives.
//!
//! Synthetic recipe: class `k` emits a sum of sinusoids drawn from its
//! frequency band plus AR(1) noise; each subject applies a random
//! orthonormal channel mixing and a gain, so energy is preserved up to
//! the gain. The stream walks contiguous per-class runs with W-segment
//! linear cross-fades between consecutive classes; cross-fade segments
//! carry the dominant-weight label in the metadata.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const SEGMENT_MAGIC: &[u8; 4] = b"SSEG";
const SEGMENT_VERSION: u16 = 1;

/// One multichannel time window, channel-major (`C * L` values).
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub values: Vec<Real>,
}

/// Learner-facing ordered segment sequence. Carries no labels.
#[derive(Debug, Clone)]
pub struct Stream {
    pub channels: usize,
    pub segment_len: usize,
    pub segments: Vec<Segment>,
}

impl Stream {
    /// Stack the picked segments into a `(B, C, L)` tensor.
    pub fn batch_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.segment_len);
        for &i in indices {
            data.extend_from_slice(&self.segments[i].values);
        }
        Tensor::new(vec![indices.len(), self.channels, self.segment_len], data)
    }
}

/// Evaluation-side metadata aligned with a [`Stream`].
#[derive(Debug, Clone)]
pub struct StreamMeta {
    pub labels: Vec<usize>,
    pub subjects: Vec<usize>,
}

impl StreamMeta {
    /// Index of the last segment of each subject, in subject order.
    pub fn subject_boundaries(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for i in 0..self.subjects.len() {
            if i + 1 == self.subjects.len() || self.subjects[i + 1] != self.subjects[i] {
                out.push(i);
            }
        }
        out
    }
}

/// Labeled segments for pretraining and evaluation.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub channels: usize,
    pub segment_len: usize,
    pub segments: Vec<Segment>,
    pub labels: Vec<usize>,
    pub subjects: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn batch_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.segment_len);
        for &i in indices {
            data.extend_from_slice(&self.segments[i].values);
        }
        Tensor::new(vec![indices.len(), self.channels, self.segment_len], data)
    }

    /// Subset belonging to one subject.
    pub fn subject_subset(&self, subject: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.subjects[i] == subject).collect();
        LabeledDataset {
            channels: self.channels,
            segment_len: self.segment_len,
            segments: idx.iter().map(|&i| self.segments[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            subjects: idx.iter().map(|&i| self.subjects[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub segment_len: usize,
    /// Segments per contiguous class run.
    pub segments_per_run: usize,
    /// How many runs of each class a subject's sequence contains.
    pub runs_per_class: usize,
    /// Cross-fade width between consecutive runs, in segments.
    pub transition_width: usize,
    pub noise_std: Real,
    pub seed: u64,
    pub sample_rate_hz: Real,
    /// Per-class frequency bands (Hz); must be pairwise disjoint.
    pub class_bands: Vec<(Real, Real)>,
    pub test_segments_per_class: usize,
    pub source_segments_per_class: usize,
    /// Source-domain subjects (with their own mixings), kept apart from
    /// the streamed subjects.
    pub source_subjects: usize,
    pub gain_range: (Real, Real),
    /// Per-subject spectral offset: every band edge of a subject moves
    /// by one uniform draw from [-shift, +shift] Hz. Zero keeps subjects
    /// spectrally identical up to channel mixing.
    pub subject_band_shift_hz: Real,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_subjects: 4,
            num_classes: 4,
            channels: 4,
            segment_len: 128,
            segments_per_run: 12,
            runs_per_class: 1,
            transition_width: 2,
            noise_std: 0.1,
            seed: 0,
            sample_rate_hz: 64.0,
            class_bands: vec![(4.0, 7.0), (10.0, 13.0), (16.0, 19.0), (22.0, 25.0)],
            test_segments_per_class: 8,
            source_segments_per_class: 40,
            source_subjects: 3,
            gain_range: (0.9, 1.1),
            subject_band_shift_hz: 0.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic: need at least 2 classes"));
        }
        if self.class_bands.len() != self.num_classes {
            return Err(Error::config(format!(
                "synthetic: {} classes but {} bands",
                self.num_classes,
                self.class_bands.len()
            )));
        }
        let nyquist = self.sample_rate_hz / 2.0;
        let shift = self.subject_band_shift_hz.abs();
        for (i, &(lo, hi)) in self.class_bands.iter().enumerate() {
            if lo - shift <= 0.0 || hi <= lo || hi + shift >= nyquist {
                return Err(Error::config(format!(
                    "synthetic: band {i} ({lo}, {hi}) infeasible below Nyquist {nyquist} with shift {shift}"
                )));
            }
        }
        for i in 0..self.class_bands.len() {
            for j in i + 1..self.class_bands.len() {
                let (a, b) = (self.class_bands[i], self.class_bands[j]);
                if a.0 < b.1 && b.0 < a.1 {
                    return Err(Error::config(format!(
                        "synthetic: bands {i} and {j} overlap"
                    )));
                }
            }
        }
        if self.n_subjects == 0 || self.channels == 0 || self.segment_len == 0 {
            return Err(Error::config("synthetic: empty dimensions"));
        }
        if self.segments_per_run == 0 || self.runs_per_class == 0 {
            return Err(Error::config(
                "synthetic: segments_per_run and runs_per_class must be >= 1",
            ));
        }
        Ok(())
    }
}

/// Everything one synthetic simulation produces. Only `stream` is
/// learner-facing.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub stream: Stream,
    pub stream_meta: StreamMeta,
    /// Per-subject labeled test segments (never streamed).
    pub test: LabeledDataset,
    /// Labeled source-domain set for pretraining.
    pub source: LabeledDataset,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix-style diffusion
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> Real {
    let u1: Real = rng.gen_range(1e-12..1.0);
    let u2: Real = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI as Real * u2).cos()
}

/// Random orthonormal matrix via Gram-Schmidt on a Gaussian draw.
fn random_orthonormal(c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Real>> {
    let mut q: Vec<Vec<Real>> = Vec::with_capacity(c);
    while q.len() < c {
        let mut v: Vec<Real> = (0..c).map(|_| gaussian(rng)).collect();
        for existing in &q {
            let proj: Real = v.iter().zip(existing).map(|(a, b)| a * b).sum();
            for (vi, &ei) in v.iter_mut().zip(existing) {
                *vi -= proj * ei;
            }
        }
        let norm: Real = v.iter().map(|x| x * x).sum::<Real>().sqrt();
        if norm > 1e-8 {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            q.push(v);
        }
    }
    q
}

struct SubjectMixing {
    q: Vec<Vec<Real>>,
    gain: Real,
    band_shift: Real,
}

fn subject_mixing(config: &SyntheticConfig, salt: u64) -> SubjectMixing {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, salt));
    let q = random_orthonormal(config.channels, &mut rng);
    let gain = rng.gen_range(config.gain_range.0..config.gain_range.1);
    let s = config.subject_band_shift_hz;
    let band_shift = if s > 0.0 { rng.gen_range(-s..s) } else { 0.0 };
    SubjectMixing { q, gain, band_shift }
}

/// Unmixed class signal: per channel, two sinusoids drawn from the
/// class band (offset by the subject's spectral shift) plus AR(1)
/// noise. Channel-major `C * L` values.
fn class_signal(
    config: &SyntheticConfig,
    class: usize,
    band_shift: Real,
    rng: &mut ChaCha8Rng,
) -> Vec<Real> {
    let (lo, hi) = (
        config.class_bands[class].0 + band_shift,
        config.class_bands[class].1 + band_shift,
    );
    let c = config.channels;
    let l = config.segment_len;
    let dt = 1.0 / config.sample_rate_hz;
    let mut out = vec![0.0; c * l];
    for ch in 0..c {
        let row = &mut out[ch * l..(ch + 1) * l];
        for _ in 0..2 {
            let freq = rng.gen_range(lo..hi);
            let phase = rng.gen_range(0.0..(2.0 * std::f64::consts::PI as Real));
            let amp = rng.gen_range(0.5..1.0);
            for (t, v) in row.iter_mut().enumerate() {
                *v += amp
                    * (2.0 * std::f64::consts::PI as Real * freq * t as Real * dt + phase).sin();
            }
        }
        if config.noise_std > 0.0 {
            let rho: Real = 0.7;
            let mut e = 0.0;
            let scale = config.noise_std * (1.0 - rho * rho).sqrt();
            for v in row.iter_mut() {
                e = rho * e + scale * gaussian(rng);
                *v += e;
            }
        }
    }
    out
}

fn apply_mixing(base: &[Real], mixing: &SubjectMixing, c: usize, l: usize) -> Vec<Real> {
    let mut out = vec![0.0; c * l];
    for ch in 0..c {
        let row = &mut out[ch * l..(ch + 1) * l];
        for (src, &w) in mixing.q[ch].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (t, o) in row.iter_mut().enumerate() {
                *o += mixing.gain * w * base[src * l + t];
            }
        }
    }
    out
}

/// Generate the stream, the per-subject test sets and the labeled
/// source set.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let k = config.num_classes;
    let (c, l) = (config.channels, config.segment_len);

    let mut stream_segments = Vec::new();
    let mut labels = Vec::new();
    let mut subjects = Vec::new();
    for s in 0..config.n_subjects {
        let mixing = subject_mixing(config, 0x10_0000 + s as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x20_0000 + s as u64));
        // per-subject class run order
        let mut order: Vec<usize> = (0..k)
            .flat_map(|c| std::iter::repeat(c).take(config.runs_per_class))
            .collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for (ri, &class) in order.iter().enumerate() {
            for _ in 0..config.segments_per_run {
                let base = class_signal(config, class, mixing.band_shift, &mut rng);
                stream_segments.push(Segment { values: apply_mixing(&base, &mixing, c, l) });
                labels.push(class);
                subjects.push(s);
            }
            if ri + 1 < order.len() {
                let next = order[ri + 1];
                let w = config.transition_width;
                for step in 1..=w {
                    let alpha = step as Real / (w as Real + 1.0);
                    let a = class_signal(config, class, mixing.band_shift, &mut rng);
                    let b = class_signal(config, next, mixing.band_shift, &mut rng);
                    let mixed: Vec<Real> = a
                        .iter()
                        .zip(&b)
                        .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
                        .collect();
                    stream_segments.push(Segment { values: apply_mixing(&mixed, &mixing, c, l) });
                    labels.push(if alpha <= 0.5 { class } else { next });
                    subjects.push(s);
                }
            }
        }
    }

    // iid test segments per (subject, class); never streamed
    let mut test_segments = Vec::new();
    let mut test_labels = Vec::new();
    let mut test_subjects = Vec::new();
    for s in 0..config.n_subjects {
        let mixing = subject_mixing(config, 0x10_0000 + s as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x30_0000 + s as u64));
        for class in 0..k {
            for _ in 0..config.test_segments_per_class {
                let base = class_signal(config, class, mixing.band_shift, &mut rng);
                test_segments.push(Segment { values: apply_mixing(&base, &mixing, c, l) });
                test_labels.push(class);
                test_subjects.push(s);
            }
        }
    }

    // labeled source set over its own subjects
    let mut source_segments = Vec::new();
    let mut source_labels = Vec::new();
    let mut source_subjects = Vec::new();
    for s in 0..config.source_subjects {
        let mixing = subject_mixing(config, 0x40_0000 + s as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x50_0000 + s as u64));
        for class in 0..k {
            for _ in 0..config.source_segments_per_class {
                let base = class_signal(config, class, mixing.band_shift, &mut rng);
                source_segments.push(Segment { values: apply_mixing(&base, &mixing, c, l) });
                source_labels.push(class);
                source_subjects.push(s);
            }
        }
    }

    Ok(SyntheticData {
        stream: Stream { channels: c, segment_len: l, segments: stream_segments },
        stream_meta: StreamMeta { labels, subjects },
        test: LabeledDataset {
            channels: c,
            segment_len: l,
            segments: test_segments,
            labels: test_labels,
            subjects: test_subjects,
        },
        source: LabeledDataset {
            channels: c,
            segment_len: l,
            segments: source_segments,
            labels: source_labels,
            subjects: source_subjects,
        },
    })
}

// ── Cursor ──────────────────────────────────────────────────────────

/// Single-consumer read position over a stream, instrumented so tests
/// can certify single-pass consumption.
#[derive(Debug, Clone)]
pub struct StreamCursor {
    total: usize,
    pos: usize,
    yield_counts: Vec<u32>,
    dropped_tail: usize,
}

impl StreamCursor {
    pub fn new(stream: &Stream) -> Self {
        StreamCursor {
            total: stream.segments.len(),
            pos: 0,
            yield_counts: vec![0; stream.segments.len()],
            dropped_tail: 0,
        }
    }

    /// Indices of the next batch (up to `b` segments, stream order). A
    /// final tail of fewer than 2 segments is dropped, recorded in
    /// `dropped_tail`. `None` signals end of stream.
    pub fn next_batch(&mut self, b: usize) -> Option<Vec<usize>> {
        if b < 2 {
            return None;
        }
        let remaining = self.total - self.pos;
        if remaining == 0 {
            return None;
        }
        if remaining < 2 {
            self.dropped_tail = remaining;
            self.pos = self.total;
            return None;
        }
        let take = b.min(remaining);
        let batch: Vec<usize> = (self.pos..self.pos + take).collect();
        for &i in &batch {
            self.yield_counts[i] += 1;
        }
        self.pos += take;
        Some(batch)
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn dropped_tail(&self) -> usize {
        self.dropped_tail
    }

    /// How many times each segment has been yielded; single-pass means
    /// every entry is at most 1.
    pub fn yield_counts(&self) -> &[u32] {
        &self.yield_counts
    }
}

// ── Segment file I/O ────────────────────────────────────────────────

/// Optional sidecar metadata for a segment file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SidecarMeta {
    pub labels: Vec<usize>,
    pub subjects: Vec<usize>,
    pub sample_rate_hz: f64,
}

/// A segment file plus its sidecar if one was found.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub channels: usize,
    pub segment_len: usize,
    pub segments: Vec<Segment>,
    pub meta: Option<SidecarMeta>,
}

impl LoadedDataset {
    pub fn into_stream(self) -> Stream {
        Stream {
            channels: self.channels,
            segment_len: self.segment_len,
            segments: self.segments,
        }
    }

    /// Labeled view; errors when the sidecar is missing (such a file can
    /// be streamed but not evaluated).
    pub fn into_labeled(self) -> Result<(LabeledDataset, f64)> {
        let meta = self.meta.ok_or_else(|| {
            Error::data("segment file has no sidecar metadata; cannot evaluate")
        })?;
        if meta.labels.len() != self.segments.len() || meta.subjects.len() != self.segments.len() {
            return Err(Error::data("sidecar arrays do not match segment count"));
        }
        Ok((
            LabeledDataset {
                channels: self.channels,
                segment_len: self.segment_len,
                segments: self.segments,
                labels: meta.labels,
                subjects: meta.subjects,
            },
            meta.sample_rate_hz,
        ))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Write segments in the binary format: magic `SSEG`, u16 version, u16
/// channels, u32 samples-per-segment, u32 segment count, then f32
/// little-endian values in segment-major, channel-major order.
pub fn write_segments(
    path: &Path,
    channels: usize,
    segment_len: usize,
    segments: &[Segment],
    meta: Option<&SidecarMeta>,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(SEGMENT_MAGIC)?;
    f.write_all(&SEGMENT_VERSION.to_le_bytes())?;
    f.write_all(&(channels as u16).to_le_bytes())?;
    f.write_all(&(segment_len as u32).to_le_bytes())?;
    f.write_all(&(segments.len() as u32).to_le_bytes())?;
    for s in segments {
        if s.values.len() != channels * segment_len {
            return Err(Error::contract("write_segments: segment size mismatch"));
        }
        for &v in &s.values {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    if let Some(m) = meta {
        let json = serde_json::to_vec_pretty(m)
            .map_err(|e| Error::Data(format!("sidecar serialization: {e}")))?;
        std::fs::write(sidecar_path(path), json)?;
    }
    Ok(())
}

/// Read a segment file written by [`write_segments`] and its sidecar if
/// present.
pub fn load_segments(path: &Path) -> Result<LoadedDataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::data("segment file: truncated header"))?;
    if &magic != SEGMENT_MAGIC {
        return Err(Error::data("segment file: bad magic"));
    }
    let mut b2 = [0u8; 2];
    f.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != SEGMENT_VERSION {
        return Err(Error::data(format!("segment file: unsupported version {version}")));
    }
    f.read_exact(&mut b2)?;
    let channels = u16::from_le_bytes(b2) as usize;
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4)?;
    let segment_len = u32::from_le_bytes(b4) as usize;
    f.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    if channels == 0 || segment_len == 0 {
        return Err(Error::data("segment file: empty dimensions"));
    }
    let mut segments = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        let mut values = Vec::with_capacity(channels * segment_len);
        for _ in 0..channels * segment_len {
            f.read_exact(&mut buf)
                .map_err(|_| Error::data("segment file: truncated payload"))?;
            values.push(f32::from_le_bytes(buf) as Real);
        }
        segments.push(Segment { values });
    }
    let meta_path = sidecar_path(path);
    let meta = if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path)?;
        Some(
            serde_json::from_str::<SidecarMeta>(&text)
                .map_err(|e| Error::Data(format!("sidecar parse: {e}")))?,
        )
    } else {
        None
    };
    Ok(LoadedDataset { channels, segment_len, segments, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn quick_config() -> SyntheticConfig {
        SyntheticConfig {
            n_subjects: 2,
            num_classes: 2,
            channels: 3,
            segment_len: 64,
            segments_per_run: 10,
            transition_width: 0,
            noise_std: 0.0,
            seed: 42,
            class_bands: vec![(4.0, 7.0), (12.0, 15.0)],
            test_segments_per_class: 4,
            source_segments_per_class: 6,
            source_subjects: 2,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn stream_length_counts() {
        let data = generate_synthetic(&quick_config()).unwrap();
        assert_eq!(data.stream.segments.len(), 2 * 2 * 10);
        let mut cfg = quick_config();
        cfg.transition_width = 2;
        let data = generate_synthetic(&cfg).unwrap();
        // per subject: K runs + (K-1) * W transitions
        assert_eq!(data.stream.segments.len(), 2 * (2 * 10 + 2));
    }

    #[test]
    fn transition_labels_follow_dominant_weight() {
        let mut cfg = quick_config();
        cfg.transition_width = 2;
        let data = generate_synthetic(&cfg).unwrap();
        // first subject: run of 10, then 2 transitions at alpha 1/3 and
        // 2/3, labeled (first class, second class)
        let first = data.stream_meta.labels[0];
        let second = data.stream_meta.labels[12];
        assert_eq!(data.stream_meta.labels[10], first);
        assert_eq!(data.stream_meta.labels[11], second);
    }

    #[test]
    fn mixing_is_orthonormal_and_energy_preserving() {
        let cfg = quick_config();
        let mixing = subject_mixing(&cfg, 0x10_0000);
        // rows orthonormal
        for i in 0..cfg.channels {
            for j in 0..cfg.channels {
                let dot: Real = mixing.q[i].iter().zip(&mixing.q[j]).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-9, "q[{i}].q[{j}] = {dot}");
            }
        }
        // energy preserved up to the gain
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = class_signal(&cfg, 0, 0.0, &mut rng);
        let mixed = apply_mixing(&base, &mixing, cfg.channels, cfg.segment_len);
        let e_base: Real = base.iter().map(|v| v * v).sum();
        let e_mixed: Real = mixed.iter().map(|v| v * v).sum();
        assert!((e_mixed - mixing.gain * mixing.gain * e_base).abs() < 1e-9 * e_base.max(1.0));
    }

    #[test]
    fn test_segments_never_appear_in_stream() {
        let data = generate_synthetic(&quick_config()).unwrap();
        let hash = |s: &Segment| -> u64 {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for v in &s.values {
                for b in (*v as f64).to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
            h
        };
        let stream_hashes: HashSet<u64> = data.stream.segments.iter().map(hash).collect();
        for s in &data.test.segments {
            assert!(!stream_hashes.contains(&hash(s)));
        }
        for s in &data.source.segments {
            assert!(!stream_hashes.contains(&hash(s)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&quick_config()).unwrap();
        let b = generate_synthetic(&quick_config()).unwrap();
        assert_eq!(a.stream.segments, b.stream.segments);
        assert_eq!(a.test.segments, b.test.segments);
    }

    /// Band-power features via a naive DFT at the integer bins inside
    /// each class band, normalized to sum 1.
    fn band_power_features(cfg: &SyntheticConfig, seg: &Segment) -> Vec<Real> {
        let l = cfg.segment_len;
        let fs = cfg.sample_rate_hz;
        let mut feats = vec![0.0; cfg.class_bands.len()];
        for (bi, &(lo, hi)) in cfg.class_bands.iter().enumerate() {
            for j in 0..l / 2 {
                let freq = j as Real * fs / l as Real;
                if freq < lo || freq > hi {
                    continue;
                }
                for ch in 0..cfg.channels {
                    let row = &seg.values[ch * l..(ch + 1) * l];
                    let (mut re, mut im) = (0.0, 0.0);
                    for (t, &v) in row.iter().enumerate() {
                        let ang = -2.0 * std::f64::consts::PI as Real * j as Real * t as Real
                            / l as Real;
                        re += v * ang.cos();
                        im += v * ang.sin();
                    }
                    feats[bi] += re * re + im * im;
                }
            }
        }
        let total: Real = feats.iter().sum();
        if total > 0.0 {
            for f in feats.iter_mut() {
                *f /= total;
            }
        }
        feats
    }

    #[test]
    fn band_power_oracle_classifies_zero_noise_tests_perfectly() {
        let cfg = quick_config();
        let data = generate_synthetic(&cfg).unwrap();
        // centroids from the labeled source set
        let k = cfg.num_classes;
        let mut centroids = vec![vec![0.0; k]; k];
        let mut counts = vec![0usize; k];
        for (seg, &label) in data.source.segments.iter().zip(&data.source.labels) {
            let f = band_power_features(&cfg, seg);
            counts[label] += 1;
            for (c, v) in centroids[label].iter_mut().zip(&f) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *n as Real;
            }
        }
        let mut correct = 0;
        for (seg, &label) in data.test.segments.iter().zip(&data.test.labels) {
            let f = band_power_features(&cfg, seg);
            let mut best = (0, Real::INFINITY);
            for (ci, c) in centroids.iter().enumerate() {
                let d: Real = c.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (ci, d);
                }
            }
            if best.0 == label {
                correct += 1;
            }
        }
        assert_eq!(correct, data.test.len(), "oracle accuracy below 100%");
    }

    #[test]
    fn cursor_batches_and_conservation() {
        let data = generate_synthetic(&quick_config()).unwrap();
        let mut cursor = StreamCursor::new(&data.stream);
        let mut total = 0;
        let mut batches = Vec::new();
        while let Some(batch) = cursor.next_batch(32) {
            total += batch.len();
            batches.push(batch.len());
        }
        assert_eq!(batches, vec![32, 8]);
        assert_eq!(total + cursor.dropped_tail(), data.stream.segments.len());
        assert!(cursor.yield_counts().iter().all(|&c| c <= 1));
        // two cursors agree
        let mut c2 = StreamCursor::new(&data.stream);
        assert_eq!(c2.next_batch(32).unwrap().len(), 32);
    }

    #[test]
    fn cursor_drops_singleton_tail() {
        let stream = Stream {
            channels: 1,
            segment_len: 4,
            segments: (0..7).map(|i| Segment { values: vec![i as Real; 4] }).collect(),
        };
        let mut cursor = StreamCursor::new(&stream);
        assert_eq!(cursor.next_batch(3).unwrap(), vec![0, 1, 2]);
        assert_eq!(cursor.next_batch(3).unwrap(), vec![3, 4, 5]);
        assert!(cursor.next_batch(3).is_none());
        assert_eq!(cursor.dropped_tail(), 1);
    }

    #[test]
    fn segment_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.sseg");
        // f32-representable values survive bit-exactly
        let segments: Vec<Segment> = (0..3)
            .map(|i| Segment {
                values: (0..8).map(|j| (i * 8 + j) as Real * 0.25).collect(),
            })
            .collect();
        let meta = SidecarMeta {
            labels: vec![0, 1, 0],
            subjects: vec![0, 0, 1],
            sample_rate_hz: 128.0,
        };
        write_segments(&path, 2, 4, &segments, Some(&meta)).unwrap();
        let loaded = load_segments(&path).unwrap();
        assert_eq!(loaded.channels, 2);
        assert_eq!(loaded.segment_len, 4);
        assert_eq!(loaded.segments, segments);
        assert_eq!(loaded.meta.as_ref().unwrap(), &meta);
    }

    #[test]
    fn header_contract_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sseg");
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(load_segments(&path), Err(Error::Data(_))));
        // truncated payload: header says 2 segments of 14x896 but no data
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SSEG");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&14u16.to_le_bytes());
        bytes.extend_from_slice(&896u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_segments(&path), Err(Error::Data(_))));
        // valid payload parses into 2 segments
        for _ in 0..2 * 14 * 896 {
            bytes.extend_from_slice(&1.5f32.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let loaded = load_segments(&path).unwrap();
        assert_eq!(loaded.segments.len(), 2);
        assert!(loaded.meta.is_none());
        // no sidecar: streaming works, evaluation does not
        assert!(loaded.into_labeled().is_err());
    }

    #[test]
    fn overlapping_bands_rejected() {
        let mut cfg = quick_config();
        cfg.class_bands = vec![(4.0, 8.0), (7.0, 10.0)];
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }
}

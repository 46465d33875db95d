//! Fixed-capacity replay memory with entropy-based curation.
//!
//! Stored samples are raw segments, not embeddings: the meta-model keeps
//! evolving, so embeddings computed at admission time would go stale.
//! Candidates (and, optionally, the existing entries) are scored by the
//! entropy of a temperature-softened softmax over the current model's
//! logits, and each class retains its lowest-entropy entries under a
//! per-class quota. A uniform-random replacement policy backs the
//! ablation variants.

use crate::error::{Error, Result};
use crate::numerics::{kernels, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MenmConfig {
    /// Softening temperature for the entropy scores.
    pub temperature: Real,
    pub capacity: usize,
    /// Rescore existing entries with the current model on every
    /// enhancement; entropies from an older model are not comparable to
    /// fresh ones.
    pub rescore_existing: bool,
}

impl Default for MenmConfig {
    fn default() -> Self {
        MenmConfig {
            temperature: 10.0,
            capacity: 200,
            rescore_existing: true,
        }
    }
}

/// One stored sample: the raw segment, its pseudo-label, the entropy
/// score it was last given, and the time step it arrived.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub segment: Vec<Real>,
    pub pseudo_label: usize,
    pub entropy: Real,
    pub arrival_step: usize,
    hash: u64,
}

impl MemoryEntry {
    pub fn new(segment: Vec<Real>, pseudo_label: usize, entropy: Real, arrival_step: usize) -> Self {
        let hash = content_hash(&segment);
        MemoryEntry { segment, pseudo_label, entropy, arrival_step, hash }
    }
}

fn content_hash(values: &[Real]) -> u64 {
    // FNV-1a over the value bit patterns
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in (*v as f64).to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Softmax of `logits / t`, max-shifted. `t` must be positive.
pub fn tempered_softmax(logits: &[Real], t: Real) -> Result<Vec<Real>> {
    if t <= 0.0 {
        return Err(Error::contract("tempered_softmax: temperature must be > 0"));
    }
    if logits.is_empty() {
        return Err(Error::contract("tempered_softmax: empty logits"));
    }
    let scaled: Vec<Real> = logits.iter().map(|v| v / t).collect();
    let mut out = vec![0.0; logits.len()];
    kernels::softmax_into(&scaled, &mut out);
    Ok(out)
}

/// Shannon entropy of a probability vector, with `0 * ln 0 = 0`. The
/// input must sum to 1 within 1e-9 and be non-negative.
pub fn prediction_entropy(probs: &[Real]) -> Result<Real> {
    let sum: Real = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || probs.iter().any(|&p| p < 0.0) {
        return Err(Error::contract(format!(
            "prediction_entropy: not a distribution (sum {sum})"
        )));
    }
    Ok(probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum())
}

/// Entropy of the temperature-softened prediction for one logit vector.
pub fn entropy_of_logits(logits: &[Real], t: Real) -> Result<Real> {
    prediction_entropy(&tempered_softmax(logits, t)?)
}

/// The replay buffer. Never exceeds its capacity; retention keeps the
/// lowest-entropy entries of each class under a `capacity / K` quota
/// (the division remainder goes to the classes with the most
/// candidates, ties to the lower class index; entropy ties prefer the
/// newer arrival).
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    num_classes: usize,
    entries: Vec<MemoryEntry>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, num_classes: usize) -> Self {
        MemoryBuffer { capacity, num_classes, entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for e in &self.entries {
            counts[e.pseudo_label] += 1;
        }
        counts
    }

    /// Direct storage for the very first batch (the buffer is empty and
    /// nothing can be matched yet). Truncates to capacity in entropy
    /// order if oversized.
    pub fn store_initial(&mut self, mut entries: Vec<MemoryEntry>) -> Result<()> {
        if !self.entries.is_empty() {
            return Err(Error::contract("store_initial on a non-empty buffer"));
        }
        self.check_labels(&entries)?;
        if entries.len() > self.capacity {
            entries.sort_by(|a, b| a.entropy.total_cmp(&b.entropy));
            entries.truncate(self.capacity);
        }
        self.entries = entries;
        Ok(())
    }

    fn check_labels(&self, entries: &[MemoryEntry]) -> Result<()> {
        for e in entries {
            if e.pseudo_label >= self.num_classes {
                return Err(Error::data(format!(
                    "pseudo-label {} out of range 0..{}",
                    e.pseudo_label, self.num_classes
                )));
            }
            if !e.entropy.is_finite() {
                return Err(Error::Numerical("non-finite entropy score".into()));
            }
        }
        Ok(())
    }

    /// Existing entries plus candidates with exact duplicates dropped
    /// (same bits, same label; the stored copy and its arrival step
    /// win), in buffer-then-candidate order.
    fn dedup_pool(&self, candidates: Vec<MemoryEntry>) -> Vec<MemoryEntry> {
        let mut pool: Vec<MemoryEntry> = self.entries.clone();
        for c in candidates {
            let dup = pool.iter().any(|e| {
                e.hash == c.hash && e.pseudo_label == c.pseudo_label && e.segment == c.segment
            });
            if !dup {
                pool.push(c);
            }
        }
        pool
    }

    /// Entropy-curated update: scores are already attached to the
    /// entries. `rescored` optionally carries fresh entropies for the
    /// existing entries (same order as `entries()`).
    pub fn enhance(
        &mut self,
        candidates: Vec<MemoryEntry>,
        rescored: Option<&[Real]>,
    ) -> Result<()> {
        self.check_labels(&candidates)?;
        if let Some(scores) = rescored {
            if scores.len() != self.entries.len() {
                return Err(Error::contract(
                    "rescored entropies must match the current entry count",
                ));
            }
            for (e, &s) in self.entries.iter_mut().zip(scores) {
                e.entropy = s;
            }
        }
        let pool = self.dedup_pool(candidates);
        // per-class pools, in stable pool order
        let mut by_class: Vec<Vec<MemoryEntry>> = vec![Vec::new(); self.num_classes];
        for e in pool {
            by_class[e.pseudo_label].push(e);
        }
        let quotas = self.quotas(&by_class);
        let mut kept = Vec::with_capacity(self.capacity);
        for (class, mut members) in by_class.into_iter().enumerate() {
            members.sort_by(|a, b| {
                a.entropy
                    .total_cmp(&b.entropy)
                    .then(b.arrival_step.cmp(&a.arrival_step))
            });
            members.truncate(quotas[class]);
            kept.extend(members);
        }
        self.entries = kept;
        debug_assert!(self.entries.len() <= self.capacity);
        Ok(())
    }

    /// Per-class retention quotas: `capacity / K` each, remainder to the
    /// classes with the most pooled candidates (ties to lower index).
    fn quotas(&self, by_class: &[Vec<MemoryEntry>]) -> Vec<usize> {
        let k = self.num_classes;
        let base = self.capacity / k;
        let remainder = self.capacity % k;
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| by_class[b].len().cmp(&by_class[a].len()).then(a.cmp(&b)));
        let mut quotas = vec![base; k];
        for &class in order.iter().take(remainder) {
            quotas[class] += 1;
        }
        quotas
    }

    /// Uniform-random replacement: keep a random subset of the pooled
    /// entries when over capacity. Backs the no-MEnM/random-memory
    /// variants.
    pub fn random_update(&mut self, candidates: Vec<MemoryEntry>, seed: u64) -> Result<()> {
        self.check_labels(&candidates)?;
        let pool = self.dedup_pool(candidates);
        if pool.len() <= self.capacity {
            self.entries = pool;
            return Ok(());
        }
        let n = pool.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..n).collect();
        for i in 0..self.capacity {
            let j = rng.gen_range(i..n);
            indices.swap(i, j);
        }
        let mut keep = vec![false; n];
        for &i in &indices[..self.capacity] {
            keep[i] = true;
        }
        self.entries = pool
            .into_iter()
            .zip(keep)
            .filter_map(|(e, k)| k.then_some(e))
            .collect();
        debug_assert!(self.entries.len() == self.capacity);
        Ok(())
    }

    /// Uniform sample without replacement of `min(size, len)` entries,
    /// deterministic for a given seed. Returned in draw order, so a
    /// full-size sample is a permutation of the buffer.
    pub fn sample_replay_batch(&self, size: usize, seed: u64) -> Vec<&MemoryEntry> {
        let n = self.entries.len();
        let take = size.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..n).collect();
        for i in 0..take {
            let j = rng.gen_range(i..n);
            indices.swap(i, j);
        }
        indices[..take].iter().map(|&i| &self.entries[i]).collect()
    }

    /// CSV export of the buffer with one embedding row per entry:
    /// `arrival_step,pseudo_label,entropy,embedding_0..embedding_{d-1}`.
    pub fn export_csv(&self, embeddings: &crate::numerics::Tensor) -> Result<String> {
        if embeddings.shape().len() != 2 || embeddings.shape()[0] != self.entries.len() {
            return Err(Error::contract(
                "export_csv: embedding rows must match entry count",
            ));
        }
        let d = embeddings.shape()[1];
        let mut out = String::from("arrival_step,pseudo_label,entropy");
        for i in 0..d {
            out.push_str(&format!(",embedding_{i}"));
        }
        out.push('\n');
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(&format!("{},{},{}", e.arrival_step, e.pseudo_label, e.entropy));
            for v in embeddings.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(tag: Real, label: usize, entropy: Real, step: usize) -> MemoryEntry {
        MemoryEntry::new(vec![tag, tag + 0.5], label, entropy, step)
    }

    #[test]
    fn softmax_uniform_for_zero_logits() {
        for t in [1.0, 10.0, 1000.0] {
            let s = tempered_softmax(&[0.0; 4], t).unwrap();
            for &p in &s {
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_two_logits_at_t2() {
        let s = tempered_softmax(&[2.0, 0.0], 2.0).unwrap();
        assert!((s[0] - 0.7311).abs() < 1e-4, "{s:?}");
        assert!((s[1] - 0.2689).abs() < 1e-4, "{s:?}");
    }

    #[test]
    fn softmax_approaches_uniform_for_large_t() {
        let s = tempered_softmax(&[5.0, -3.0, 1.0], 1e9).unwrap();
        for &p in &s {
            assert!((p - 1.0 / 3.0).abs() < 1e-8);
        }
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        assert!(tempered_softmax(&[1.0], 0.0).is_err());
        assert!(tempered_softmax(&[1.0], -3.0).is_err());
    }

    #[test]
    fn entropy_examples() {
        let ln4 = (4.0 as Real).ln();
        assert!((prediction_entropy(&[0.25; 4]).unwrap() - ln4).abs() < 1e-12);
        assert_eq!(prediction_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let ln2 = (2.0 as Real).ln();
        assert!((prediction_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - ln2).abs() < 1e-12);
        assert!(prediction_entropy(&[0.7, 0.7]).is_err());
    }

    #[test]
    fn entropy_monotone_in_temperature() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let k = rng.gen_range(2..8);
            let logits: Vec<Real> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let mut prev = -1.0;
            for t in [1.0, 10.0, 100.0, 1000.0] {
                let h = entropy_of_logits(&logits, t).unwrap();
                assert!(h >= prev - 1e-12, "entropy decreased: {h} after {prev}");
                assert!(h >= 0.0 && h <= (k as Real).ln() + 1e-12);
                prev = h;
            }
        }
    }

    #[test]
    fn retention_keeps_lowest_entropy_per_class() {
        let mut buf = MemoryBuffer::new(4, 2);
        let candidates = vec![
            entry(1.0, 0, 0.1, 0),
            entry(2.0, 0, 0.9, 0),
            entry(3.0, 0, 0.5, 0),
        ];
        buf.enhance(candidates, None).unwrap();
        let mut kept: Vec<Real> = buf.entries().iter().map(|e| e.entropy).collect();
        kept.sort_by(Real::total_cmp);
        assert_eq!(kept, vec![0.1, 0.5]);
    }

    #[test]
    fn single_class_respects_quota() {
        let mut buf = MemoryBuffer::new(200, 2);
        let candidates: Vec<MemoryEntry> = (0..300)
            .map(|i| entry(i as Real, 0, i as Real / 300.0, 0))
            .collect();
        buf.enhance(candidates, None).unwrap();
        assert_eq!(buf.len(), 100);
        assert!(buf.per_class_counts()[0] <= 100);
    }

    #[test]
    fn remainder_goes_to_largest_class() {
        // capacity 5, K = 2: base quota 2, remainder 1 to the class
        // with more pooled candidates
        let mut buf = MemoryBuffer::new(5, 2);
        let mut candidates = Vec::new();
        for i in 0..4 {
            candidates.push(entry(i as Real, 0, 0.1 * i as Real, 0));
        }
        for i in 0..2 {
            candidates.push(entry(100.0 + i as Real, 1, 0.1 * i as Real, 0));
        }
        buf.enhance(candidates, None).unwrap();
        let counts = buf.per_class_counts();
        assert_eq!(counts, vec![3, 2]);
    }

    #[test]
    fn enhancement_is_idempotent_for_a_fixed_pool() {
        let mut buf = MemoryBuffer::new(4, 2);
        let candidates: Vec<MemoryEntry> = (0..6)
            .map(|i| entry(i as Real, i % 2, (i as Real) * 0.13, 3))
            .collect();
        buf.enhance(candidates.clone(), None).unwrap();
        let first = buf.clone();
        buf.enhance(candidates, None).unwrap();
        assert_eq!(buf, first);
    }

    #[test]
    fn retention_optimality_holds() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut buf = MemoryBuffer::new(20, 3);
        for step in 0..30 {
            let candidates: Vec<MemoryEntry> = (0..8)
                .map(|i| {
                    entry(
                        step as Real * 100.0 + i as Real,
                        rng.gen_range(0..3),
                        rng.gen_range(0.0..1.5),
                        step,
                    )
                })
                .collect();
            let all: Vec<MemoryEntry> = buf.dedup_pool(candidates.clone());
            buf.enhance(candidates, None).unwrap();
            assert!(buf.len() <= 20);
            // worst retained entropy <= best discarded entropy, per class
            for class in 0..3 {
                let worst_kept = buf
                    .entries()
                    .iter()
                    .filter(|e| e.pseudo_label == class)
                    .map(|e| e.entropy)
                    .fold(Real::MIN, Real::max);
                let best_discarded = all
                    .iter()
                    .filter(|e| e.pseudo_label == class)
                    .filter(|e| !buf.entries().contains(e))
                    .map(|e| e.entropy)
                    .fold(Real::MAX, Real::min);
                assert!(
                    worst_kept <= best_discarded + 1e-12,
                    "retained {worst_kept} beats discarded {best_discarded}"
                );
            }
        }
    }

    #[test]
    fn replay_sampling_contract() {
        let mut buf = MemoryBuffer::new(50, 2);
        let candidates: Vec<MemoryEntry> =
            (0..10).map(|i| entry(i as Real, i % 2, 0.1, 0)).collect();
        buf.enhance(candidates, None).unwrap();
        // clamped to buffer size
        let s = buf.sample_replay_batch(32, 7);
        assert_eq!(s.len(), 10);
        // full-size sample is a permutation
        let mut tags: Vec<Real> = s.iter().map(|e| e.segment[0]).collect();
        tags.sort_by(Real::total_cmp);
        assert_eq!(tags, (0..10).map(|i| i as Real).collect::<Vec<_>>());
        // deterministic
        let a: Vec<Real> = buf.sample_replay_batch(4, 9).iter().map(|e| e.segment[0]).collect();
        let b: Vec<Real> = buf.sample_replay_batch(4, 9).iter().map(|e| e.segment[0]).collect();
        assert_eq!(a, b);
        let c: Vec<Real> = buf.sample_replay_batch(4, 10).iter().map(|e| e.segment[0]).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn store_initial_only_on_empty_buffer() {
        let mut buf = MemoryBuffer::new(10, 2);
        buf.store_initial(vec![entry(1.0, 0, 0.2, 0)]).unwrap();
        assert_eq!(buf.len(), 1);
        assert!(buf.store_initial(vec![entry(2.0, 1, 0.3, 1)]).is_err());
    }

    #[test]
    fn csv_export_shape_and_header() {
        let mut buf = MemoryBuffer::new(10, 2);
        buf.store_initial(vec![entry(1.0, 0, 0.2, 3), entry(2.0, 1, 0.4, 5)]).unwrap();
        let z = crate::numerics::Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]])
            .unwrap();
        let csv = buf.export_csv(&z).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "arrival_step,pseudo_label,entropy,embedding_0,embedding_1,embedding_2");
        assert!(lines[1].starts_with("3,0,0.2,"));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut buf = MemoryBuffer::new(10, 2);
        assert!(buf.enhance(vec![entry(0.0, 5, 0.1, 0)], None).is_err());
    }
}

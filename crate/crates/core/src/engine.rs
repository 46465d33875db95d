//! End-to-end orchestration: source pretraining, the per-batch inner
//! loop (adapt, cluster, map, merge), buffer-backed supervised training
//! in the meta loop, memory curation, and the run metrics.
//!
//! The learner path never sees true labels or subject ids; evaluation
//! data enters only through [`run_stream`]'s `inputs.test`, which is
//! read exclusively by the accuracy measurements.

use crate::clustering::{self, KMeansConfig};
use crate::error::{Error, Result};
use crate::mapping::{self, MatchStrategy};
use crate::memory::{self, MemoryBuffer, MemoryEntry, MenmConfig};
use crate::model::{
    self, clone_model, forward_logits_graph, init_model, update_bn_buffers, Mode, ModelBundle,
    ModelConfig, ParamSet,
};
use crate::numerics::tensor::Tensor;
use crate::numerics::{AdamConfig, AdamState, Real, Tape};
use crate::ssl::{self, SslConfig};
use crate::stream::{LabeledDataset, Segment, Stream, StreamCursor, StreamMeta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Pipeline variant: the full method or one of its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Inner adaptation swapped for augmentation-based instance
    /// discrimination (NT-Xent on jittered views).
    NoSsm,
    /// Entropy curation swapped for uniform random replacement.
    NoMenm,
    /// Plain random-replacement replay baseline (same memory policy as
    /// `NoMenm`, named separately as a standalone baseline).
    RandomMemory,
}

impl Variant {
    pub fn memory_policy(&self) -> &'static str {
        match self {
            Variant::Full | Variant::NoSsm => "entropy",
            Variant::NoMenm | Variant::RandomMemory => "random",
        }
    }
}

/// How the very first batch's clusters are named.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum T0Anchor {
    /// Assign each cluster the source-model class it most resembles
    /// (optimal assignment on mean predicted probability). Keeps the
    /// pretrained classifier's class identities meaningful.
    Classifier,
    /// Raw cluster numbers become pseudo-labels.
    ClusterId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Stream batch size B.
    pub batch_size: usize,
    /// Supervised steps per time step in the meta loop.
    pub meta_steps: usize,
    pub meta_learning_rate: Real,
    pub weight_decay: Real,
    pub decoupled_weight_decay: bool,
    /// Replay samples mixed into each meta step.
    pub replay_batch: usize,
    /// Cap on current-batch samples per meta step.
    pub current_batch_cap: usize,
    pub ssl: SslConfig,
    pub kmeans: KMeansConfig,
    pub menm: MenmConfig,
    pub variant: Variant,
    pub match_strategy: MatchStrategy,
    /// Update memory before the meta training step instead of after.
    pub enhance_before_train: bool,
    /// Measure retention at the end of the run instead of after the
    /// following subject.
    pub retention_at_end: bool,
    /// Embed memory samples with the adapted clone (one shared space
    /// with the batch embeddings) rather than the meta-model.
    pub memory_embed_with_adapted: bool,
    pub t0_anchor: T0Anchor,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            meta_steps: 10,
            meta_learning_rate: 1e-4,
            weight_decay: 1e-4,
            decoupled_weight_decay: true,
            replay_batch: 32,
            current_batch_cap: 32,
            ssl: SslConfig::default(),
            kmeans: KMeansConfig::default(),
            menm: MenmConfig::default(),
            variant: Variant::Full,
            match_strategy: MatchStrategy::Optimal,
            enhance_before_train: false,
            retention_at_end: false,
            memory_embed_with_adapted: true,
            t0_anchor: T0Anchor::Classifier,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be >= 2"));
        }
        if self.meta_steps == 0 {
            return Err(Error::config("meta_steps must be >= 1"));
        }
        self.ssl.validate()?;
        if self.menm.temperature <= 0.0 {
            return Err(Error::config("menm temperature must be > 0"));
        }
        Ok(())
    }

    fn meta_adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.meta_learning_rate,
            weight_decay: self.weight_decay,
            decoupled_weight_decay: self.decoupled_weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Real,
    pub weight_decay: Real,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
        }
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ── Evaluation ──────────────────────────────────────────────────────

/// Argmax with lowest-index tie break.
fn argmax(row: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Classification accuracy of the bundle on a labeled dataset
/// (evaluation mode, chunked forward passes).
pub fn accuracy(bundle: &ModelBundle, data: &LabeledDataset) -> Result<Real> {
    if data.is_empty() {
        return Err(Error::contract("accuracy: empty dataset"));
    }
    let mut correct = 0usize;
    let chunk = 128;
    let mut i = 0;
    while i < data.len() {
        let hi = (i + chunk).min(data.len());
        let idx: Vec<usize> = (i..hi).collect();
        let batch = data.batch_tensor(&idx)?;
        let logits = model::logits_batch(bundle, &batch)?;
        for (r, &j) in idx.iter().enumerate() {
            if argmax(logits.row(r)) == data.labels[j] {
                correct += 1;
            }
        }
        i = hi;
    }
    Ok(correct as Real / data.len() as Real)
}

// ── Pretraining ─────────────────────────────────────────────────────

/// Supervised cross-entropy pretraining on a labeled source set.
/// Returns the trained bundle and its final train-set accuracy.
pub fn pretrain_source(
    model_config: &ModelConfig,
    pretrain: &PretrainConfig,
    source: &LabeledDataset,
    seed: u64,
) -> Result<(ModelBundle, Real)> {
    if let Some(&bad) = source.labels.iter().find(|&&l| l >= model_config.num_classes) {
        return Err(Error::data(format!(
            "source label {bad} out of range 0..{}",
            model_config.num_classes
        )));
    }
    let mut bundle = init_model(model_config, seed)?;
    let mut opt = AdamState::new(
        AdamConfig {
            learning_rate: pretrain.learning_rate,
            weight_decay: pretrain.weight_decay,
            ..AdamConfig::default()
        },
        &bundle.params(ParamSet::ExtractorClassifier),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xB007));
    let n = source.len();
    for _ in 0..pretrain.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(pretrain.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = source.batch_tensor(chunk)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| source.labels[i]).collect();
            let mut tape = Tape::new();
            let input = tape.leaf(batch)?;
            let g = forward_logits_graph(&mut tape, &bundle, input, Mode::Train)?;
            let loss = tape.cross_entropy(g.output, &targets)?;
            let grads = tape.backward(loss)?;
            update_bn_buffers(&mut bundle, &tape, &g.bn_nodes);
            let grad_refs: Vec<&Tensor> = g.param_ids.iter().map(|&id| grads.get(id)).collect();
            let mut params = bundle.params_mut(ParamSet::ExtractorClassifier);
            opt.step(&mut params, &grad_refs)?;
        }
    }
    let acc = accuracy(&bundle, source)?;
    Ok((bundle, acc))
}

// ── Stream state and step records ───────────────────────────────────

/// Mutable state carried across time steps.
pub struct StreamState {
    pub t: usize,
    pub model: ModelBundle,
    pub memory: MemoryBuffer,
    meta_opt: AdamState,
    seed: u64,
}

impl StreamState {
    pub fn new(pretrained: &ModelBundle, config: &TrainConfig) -> Self {
        let model = clone_model(pretrained);
        let meta_opt = AdamState::new(
            config.meta_adam(),
            &model.params(ParamSet::ExtractorClassifier),
        );
        StreamState {
            t: 0,
            model,
            memory: MemoryBuffer::new(config.menm.capacity, pretrained.config.num_classes),
            meta_opt,
            seed: config.seed,
        }
    }
}

/// One pseudo-labeled sample from the current batch.
#[derive(Debug, Clone)]
pub struct PseudoLabeled {
    pub segment: Segment,
    pub label: usize,
}

/// Outcome of the inner loop on one batch.
pub struct StepOutcome {
    /// Pseudo-labeled current batch; `None` when mapping failed and the
    /// batch was skipped for memory purposes.
    pub current: Option<Vec<PseudoLabeled>>,
    pub inner_loss_before: Real,
    pub inner_loss_after: Real,
    pub events: Vec<String>,
}

/// Per-time-step log record (JSON-lines friendly).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub inner_loss: Real,
    pub meta_loss: Real,
    pub buffer_size: usize,
    pub per_class_counts: Vec<usize>,
    pub combined_size: usize,
    pub memory_policy: String,
    pub events: Vec<String>,
}

fn stack_rows(rows: &[&[Real]], channels: usize, segment_len: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * channels * segment_len);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), channels, segment_len], data)
}

fn entropy_scores(
    bundle: &ModelBundle,
    rows: &[&[Real]],
    channels: usize,
    segment_len: usize,
    temperature: Real,
) -> Result<Vec<Real>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let batch = stack_rows(rows, channels, segment_len)?;
    let logits = model::logits_batch(bundle, &batch)?;
    (0..rows.len())
        .map(|i| memory::entropy_of_logits(logits.row(i), temperature))
        .collect()
}

/// Embed value rows with a bundle (eval mode).
fn embed_segments(
    bundle: &ModelBundle,
    rows: &[&[Real]],
    channels: usize,
    segment_len: usize,
    normalize: bool,
) -> Result<Tensor> {
    let batch = stack_rows(rows, channels, segment_len)?;
    model::embed_batch(bundle, &batch, normalize)
}

/// Name the first batch's clusters with the pretrained classifier: each
/// cluster goes to the class with the highest mean predicted
/// probability, resolved as an optimal assignment so the naming stays
/// injective.
fn anchor_clusters_to_classifier(
    meta_model: &ModelBundle,
    batch: &Tensor,
    cluster_labels: &[usize],
    n_clusters: usize,
) -> Result<Vec<usize>> {
    let k = meta_model.config.num_classes;
    let logits = model::logits_batch(meta_model, batch)?;
    let b = logits.shape()[0];
    let mut probs = vec![0.0; b * k];
    for r in 0..b {
        crate::numerics::kernels::softmax_into(logits.row(r), &mut probs[r * k..(r + 1) * k]);
    }
    let mut cost = vec![vec![Real::INFINITY; k]; n_clusters];
    for cluster in 0..n_clusters {
        let members: Vec<usize> = (0..b).filter(|&i| cluster_labels[i] == cluster).collect();
        if members.is_empty() {
            continue;
        }
        for class in 0..k {
            let mean: Real = members.iter().map(|&i| probs[i * k + class]).sum::<Real>()
                / members.len() as Real;
            cost[cluster][class] = 1.0 - mean;
        }
    }
    let mapping = mapping::match_clusters(&cost, MatchStrategy::Optimal)?;
    mapping::assign_pseudo_labels(cluster_labels, &mapping)
}

/// The inner loop for one batch: adapt a clone, cluster its embeddings,
/// map clusters onto memory labels, and return the pseudo-labeled
/// batch. The first batch is stored directly with anchored cluster
/// names.
pub fn process_stream_batch(
    state: &mut StreamState,
    stream: &Stream,
    batch_indices: &[usize],
    config: &TrainConfig,
) -> Result<StepOutcome> {
    let batch = stream.batch_tensor(batch_indices)?;
    let seed = mix(state.seed, 0xADA1_u64.wrapping_add(state.t as u64));
    let adapt = match config.variant {
        Variant::NoSsm => {
            ssl::inner_adapt_instance_discrimination(&state.model, &batch, &config.ssl, seed)?
        }
        _ => ssl::inner_adapt(&state.model, &batch, &config.ssl, seed)?,
    };
    let mut events = Vec::new();
    let k = state.model.config.num_classes;
    let embeddings = ssl::embed_for_clustering(&adapt.adapted, &batch, &config.ssl)?;
    let segments: Vec<&Segment> = batch_indices.iter().map(|&i| &stream.segments[i]).collect();

    let make_outcome = |current: Option<Vec<PseudoLabeled>>, events: Vec<String>| StepOutcome {
        current,
        inner_loss_before: adapt.loss_before,
        inner_loss_after: adapt.loss_after,
        events,
    };

    if state.memory.is_empty() {
        // first batch: cluster and store directly
        let k_eff = k.min(batch_indices.len());
        let mut km = config.kmeans.clone();
        km.k = k_eff;
        km.seed = mix(state.seed, 0xC1u64.wrapping_add(state.t as u64));
        if k_eff < k {
            events.push("t0_small_batch".to_string());
        }
        let assignment = clustering::kmeans(&embeddings, &km)?;
        let pseudo = match config.t0_anchor {
            T0Anchor::ClusterId => assignment.labels.clone(),
            T0Anchor::Classifier => anchor_clusters_to_classifier(
                &state.model,
                &batch,
                &assignment.labels,
                k_eff,
            )?,
        };
        let rows: Vec<&[Real]> = segments.iter().map(|s| s.values.as_slice()).collect();
        let scores = entropy_scores(
            &state.model,
            &rows,
            stream.channels,
            stream.segment_len,
            config.menm.temperature,
        )?;
        let entries: Vec<MemoryEntry> = segments
            .iter()
            .zip(&pseudo)
            .zip(&scores)
            .map(|((s, &l), &h)| MemoryEntry::new(s.values.clone(), l, h, state.t))
            .collect();
        state.memory.store_initial(entries)?;
        events.push("t0_direct_store".to_string());
        let current = segments
            .iter()
            .zip(&pseudo)
            .map(|(s, &l)| PseudoLabeled { segment: (*s).clone(), label: l })
            .collect();
        return Ok(make_outcome(Some(current), events));
    }

    // embeddings of the memory contents, in the same space as the batch
    let embed_model = if config.memory_embed_with_adapted {
        &adapt.adapted
    } else {
        &state.model
    };
    let mem_rows: Vec<&[Real]> = state
        .memory
        .entries()
        .iter()
        .map(|e| e.segment.as_slice())
        .collect();
    let mem_embeddings = embed_segments(
        embed_model,
        &mem_rows,
        stream.channels,
        stream.segment_len,
        config.ssl.normalize_embeddings,
    )?;
    let mem_labels: Vec<usize> = state.memory.entries().iter().map(|e| e.pseudo_label).collect();
    let memory_centroids = clustering::compute_centroids(&mem_embeddings, &mem_labels, k)?;

    let mut km = config.kmeans.clone();
    km.k = k;
    km.seed = mix(state.seed, 0xC1u64.wrapping_add(state.t as u64));
    let pseudo: Option<Vec<usize>> = match clustering::kmeans(&embeddings, &km) {
        Ok(assignment) => {
            let batch_centroids =
                clustering::compute_centroids(&embeddings, &assignment.labels, k)?;
            match mapping::cosine_distance_matrix(&batch_centroids, &memory_centroids)
                .and_then(|d| mapping::match_clusters(&d, config.match_strategy))
                .and_then(|m| mapping::assign_pseudo_labels(&assignment.labels, &m))
            {
                Ok(labels) => Some(labels),
                Err(Error::Mapping(msg)) | Err(Error::Numerical(msg)) => {
                    events.push(format!("mapping_skipped: {msg}"));
                    None
                }
                Err(other) => return Err(other),
            }
        }
        Err(Error::Clustering(_)) => {
            // too few samples to seed K clusters: nearest memory
            // centroid per sample
            events.push("kmeans_fallback_nearest_centroid".to_string());
            let dense: Vec<Vec<Real>> = memory_centroids
                .iter()
                .flat_map(|c| c.clone())
                .collect();
            let present: Vec<usize> = memory_centroids
                .iter()
                .enumerate()
                .filter_map(|(i, c)| c.as_ref().map(|_| i))
                .collect();
            let b = embeddings.shape()[0];
            let mut labels = Vec::with_capacity(b);
            for i in 0..b {
                let (nearest_idx, _) = clustering::nearest(embeddings.row(i), &dense);
                labels.push(present[nearest_idx]);
            }
            Some(labels)
        }
        Err(other) => return Err(other),
    };

    let current = pseudo.map(|labels| {
        segments
            .iter()
            .zip(&labels)
            .map(|(s, &l)| PseudoLabeled { segment: (*s).clone(), label: l })
            .collect()
    });
    Ok(make_outcome(current, events))
}

/// Meta-loop supervised training: `meta_steps` Adam steps of
/// cross-entropy over mini-batches mixing current-batch samples (up to
/// `current_batch_cap`) with a fresh replay draw from memory. Returns
/// the mean loss over the executed steps.
pub fn meta_train(
    state: &mut StreamState,
    current: Option<&[PseudoLabeled]>,
    stream_dims: (usize, usize),
    config: &TrainConfig,
) -> Result<Real> {
    let (channels, segment_len) = stream_dims;
    let mut total = 0.0;
    let mut steps_run = 0;
    for step in 0..config.meta_steps {
        let mut values = Vec::new();
        let mut targets = Vec::new();
        let mut count = 0usize;
        if let Some(cur) = current {
            let take = cur.len().min(config.current_batch_cap);
            let chosen: Vec<usize> = if take == cur.len() {
                (0..cur.len()).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(
                    state.seed,
                    0x3E7A_0000 ^ ((state.t as u64) << 16) ^ step as u64,
                ));
                let mut idx: Vec<usize> = (0..cur.len()).collect();
                for i in 0..take {
                    let j = rng.gen_range(i..idx.len());
                    idx.swap(i, j);
                }
                idx[..take].to_vec()
            };
            for i in chosen {
                values.extend_from_slice(&cur[i].segment.values);
                targets.push(cur[i].label);
                count += 1;
            }
        }
        let replay_seed = mix(state.seed, 0x5EED_0000 ^ ((state.t as u64) << 16) ^ step as u64);
        for entry in state.memory.sample_replay_batch(config.replay_batch, replay_seed) {
            values.extend_from_slice(&entry.segment);
            targets.push(entry.pseudo_label);
            count += 1;
        }
        if count < 2 {
            continue;
        }
        let batch = Tensor::new(vec![count, channels, segment_len], values)?;
        let mut tape = Tape::new();
        let input = tape.leaf(batch)?;
        let g = forward_logits_graph(&mut tape, &state.model, input, Mode::Train)?;
        let loss = tape.cross_entropy(g.output, &targets)?;
        total += tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        update_bn_buffers(&mut state.model, &tape, &g.bn_nodes);
        let grad_refs: Vec<&Tensor> = g.param_ids.iter().map(|&id| grads.get(id)).collect();
        let mut params = state.model.params_mut(ParamSet::ExtractorClassifier);
        state.meta_opt.step(&mut params, &grad_refs)?;
        steps_run += 1;
    }
    Ok(if steps_run > 0 { total / steps_run as Real } else { 0.0 })
}

/// Memory update for one step under the configured variant.
pub fn update_memory(
    state: &mut StreamState,
    current: Option<&[PseudoLabeled]>,
    stream_dims: (usize, usize),
    config: &TrainConfig,
) -> Result<()> {
    let (channels, segment_len) = stream_dims;
    let cur = current.unwrap_or(&[]);
    let cur_rows: Vec<&[Real]> = cur.iter().map(|p| p.segment.values.as_slice()).collect();
    let scores = entropy_scores(
        &state.model,
        &cur_rows,
        channels,
        segment_len,
        config.menm.temperature,
    )?;
    let candidates: Vec<MemoryEntry> = cur
        .iter()
        .zip(&scores)
        .map(|(p, &h)| MemoryEntry::new(p.segment.values.clone(), p.label, h, state.t))
        .collect();
    match config.variant {
        Variant::Full | Variant::NoSsm => {
            let rescored = if config.menm.rescore_existing && !state.memory.is_empty() {
                let mem_rows: Vec<&[Real]> = state
                    .memory
                    .entries()
                    .iter()
                    .map(|e| e.segment.as_slice())
                    .collect();
                Some(entropy_scores(
                    &state.model,
                    &mem_rows,
                    channels,
                    segment_len,
                    config.menm.temperature,
                )?)
            } else {
                None
            };
            state.memory.enhance(candidates, rescored.as_deref())?;
        }
        Variant::NoMenm | Variant::RandomMemory => {
            let seed = mix(state.seed, 0x4A9D_0000 ^ state.t as u64);
            state.memory.random_update(candidates, seed)?;
        }
    }
    Ok(())
}

// ── Full run ────────────────────────────────────────────────────────

/// Evaluation-side inputs to a run.
pub struct RunInputs<'a> {
    pub stream: &'a Stream,
    pub stream_meta: &'a StreamMeta,
    pub test: &'a LabeledDataset,
}

/// Raw per-subject measurements collected during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    /// a_j: accuracy on subject j's test set right after its last batch.
    pub adaptation: Vec<Real>,
    /// m_j: accuracy on subject j's test set after subject j+1 finished
    /// (or at end of run, per config). One entry per non-final subject.
    pub retention: Vec<Real>,
    /// End-of-run accuracy per subject.
    pub end_accuracies: Vec<Real>,
    /// Final-model accuracy on the union of all subjects' test sets.
    pub global_test_accuracy: Real,
}

/// The three summary metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub adap_acc: Real,
    pub gen_acc: Real,
    /// Mean of (m_j - a_j); negative values indicate forgetting.
    pub for_acc: Real,
}

/// Summarize a complete log: mean adaptation accuracy, the global test
/// accuracy, and mean retention gap `m_j - a_j`.
pub fn compute_metrics(log: &MetricsLog) -> Result<Metrics> {
    if log.adaptation.is_empty() {
        return Err(Error::contract("metrics log has no subjects"));
    }
    if log.retention.len() + 1 != log.adaptation.len() {
        return Err(Error::contract(format!(
            "incomplete log: {} adaptation vs {} retention entries",
            log.adaptation.len(),
            log.retention.len()
        )));
    }
    let adap_acc =
        log.adaptation.iter().sum::<Real>() / log.adaptation.len() as Real;
    let for_acc = if log.retention.is_empty() {
        0.0
    } else {
        log.retention
            .iter()
            .zip(&log.adaptation)
            .map(|(m, a)| m - a)
            .sum::<Real>()
            / log.retention.len() as Real
    };
    Ok(Metrics { adap_acc, gen_acc: log.global_test_accuracy, for_acc })
}

/// Everything a run produces.
pub struct RunOutput {
    pub metrics: Metrics,
    pub metrics_log: MetricsLog,
    pub steps: Vec<StepRecord>,
    pub final_model: ModelBundle,
    pub memory: MemoryBuffer,
    /// Stream instrumentation: how often each segment was yielded to
    /// the inner loop, and the size of a dropped (< 2 segment) tail.
    pub consumed_counts: Vec<u32>,
    pub dropped_tail: usize,
}

/// Run the full loop over a stream: per batch, inner-loop pseudo-
/// labeling, meta training on current + replay data, then memory
/// curation. Subject boundaries trigger the adaptation/retention
/// measurements. Deterministic for a fixed config and seed.
pub fn run_stream(
    pretrained: &ModelBundle,
    inputs: RunInputs<'_>,
    config: &TrainConfig,
) -> Result<RunOutput> {
    config.validate()?;
    let mut state = StreamState::new(pretrained, config);
    let mut cursor = StreamCursor::new(inputs.stream);
    let dims = (inputs.stream.channels, inputs.stream.segment_len);
    let boundaries = inputs.stream_meta.subject_boundaries();
    let n_subjects = boundaries.len();
    let mut adaptation: Vec<Real> = Vec::with_capacity(n_subjects);
    let mut retention: Vec<Real> = vec![0.0; n_subjects.saturating_sub(1)];
    let mut next_boundary = 0usize;
    let mut steps = Vec::new();

    while let Some(batch_indices) = cursor.next_batch(config.batch_size) {
        let outcome = process_stream_batch(&mut state, inputs.stream, &batch_indices, config)?;
        let stored_directly = outcome
            .events
            .iter()
            .any(|e| e == "t0_direct_store");
        let mut events = outcome.events.clone();
        let combined_size = outcome.current.as_ref().map(|c| c.len()).unwrap_or(0)
            + state.memory.len();
        let meta_loss = if config.enhance_before_train && !stored_directly {
            update_memory(&mut state, outcome.current.as_deref(), dims, config)?;
            meta_train(&mut state, outcome.current.as_deref(), dims, config)?
        } else {
            let loss = meta_train(&mut state, outcome.current.as_deref(), dims, config)?;
            if !stored_directly {
                update_memory(&mut state, outcome.current.as_deref(), dims, config)?;
            }
            loss
        };
        if cursor.dropped_tail() > 0 {
            events.push(format!("dropped_tail:{}", cursor.dropped_tail()));
        }
        steps.push(StepRecord {
            t: state.t,
            inner_loss: outcome.inner_loss_after,
            meta_loss,
            buffer_size: state.memory.len(),
            per_class_counts: state.memory.per_class_counts(),
            combined_size,
            memory_policy: config.variant.memory_policy().to_string(),
            events,
        });

        // subject boundaries crossed by this batch
        while next_boundary < n_subjects && boundaries[next_boundary] < cursor.position() {
            let subject = next_boundary;
            adaptation.push(accuracy(&state.model, &inputs.test.subject_subset(subject))?);
            if subject >= 1 && !config.retention_at_end {
                retention[subject - 1] =
                    accuracy(&state.model, &inputs.test.subject_subset(subject - 1))?;
            }
            next_boundary += 1;
        }
        state.t += 1;
    }
    // a dropped tail can leave the final boundary uncrossed; the stream
    // is exhausted, so the last subject's run is over
    while next_boundary < n_subjects {
        let subject = next_boundary;
        adaptation.push(accuracy(&state.model, &inputs.test.subject_subset(subject))?);
        if subject >= 1 && !config.retention_at_end {
            retention[subject - 1] =
                accuracy(&state.model, &inputs.test.subject_subset(subject - 1))?;
        }
        next_boundary += 1;
    }

    let mut end_accuracies = Vec::with_capacity(n_subjects);
    for s in 0..n_subjects {
        end_accuracies.push(accuracy(&state.model, &inputs.test.subject_subset(s))?);
    }
    if config.retention_at_end {
        for s in 0..n_subjects.saturating_sub(1) {
            retention[s] = end_accuracies[s];
        }
    }
    let global = accuracy(&state.model, inputs.test)?;
    let metrics_log = MetricsLog {
        adaptation,
        retention,
        end_accuracies,
        global_test_accuracy: global,
    };
    let metrics = compute_metrics(&metrics_log)?;
    Ok(RunOutput {
        metrics,
        metrics_log,
        steps,
        final_model: state.model,
        memory: state.memory,
        consumed_counts: cursor.yield_counts().to_vec(),
        dropped_tail: cursor.dropped_tail(),
    })
}

/// The desk-scale ablation benchmark: 4 subjects, K = 4, with real
/// subject shift (per-subject spectral offsets, channel mixing, gain
/// spread) and cross-fade label noise, sized so a full variant sweep
/// stays in CPU-minutes. Used by the `ablate` command and the
/// acceptance suite.
pub fn ablation_benchmark(seed: u64) -> (crate::stream::SyntheticConfig, TrainConfig) {
    let synthetic = crate::stream::SyntheticConfig {
        segments_per_run: 8,
        runs_per_class: 2,
        transition_width: 3,
        noise_std: 0.6,
        subject_band_shift_hz: 2.0,
        gain_range: (0.7, 1.3),
        source_subjects: 2,
        source_segments_per_class: 24,
        test_segments_per_class: 16,
        seed,
        ..crate::stream::SyntheticConfig::default()
    };
    let train = TrainConfig {
        meta_learning_rate: 3e-4,
        ssl: SslConfig {
            inner_learning_rate: 1e-3,
            inner_steps: 10,
            ..SslConfig::default()
        },
        menm: MenmConfig { capacity: 64, ..MenmConfig::default() },
        seed,
        ..TrainConfig::default()
    };
    (synthetic, train)
}

/// Pretraining settings paired with [`ablation_benchmark`].
pub fn ablation_pretrain() -> PretrainConfig {
    PretrainConfig { epochs: 12, ..PretrainConfig::default() }
}

/// Hex run id derived from the canonical config bytes (deterministic,
/// no timestamps).
pub fn run_id(canonical_config: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(canonical_config);
    let digest = hasher.finalize();
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// The `metrics.json` payload: self-describing (config echo + run id),
/// with the forgetting sign convention named explicitly. Byte-identical
/// across reruns of the same config and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsFile {
    pub run_id: String,
    pub seed: u64,
    pub variant: Variant,
    /// ForAcc is mean(m_j - a_j): negative values mean forgetting.
    pub forgetting_convention: String,
    pub adap_acc: Real,
    pub gen_acc: Real,
    pub for_acc: Real,
    pub per_subject_adaptation: Vec<Real>,
    pub per_subject_retention: Vec<Real>,
    pub end_accuracies: Vec<Real>,
    pub config_echo: serde_json::Value,
}

impl MetricsFile {
    pub fn new(config_echo: serde_json::Value, config: &TrainConfig, out: &RunOutput) -> Self {
        let canonical = serde_json::to_vec(&config_echo).unwrap_or_default();
        MetricsFile {
            run_id: run_id(&canonical),
            seed: config.seed,
            variant: config.variant,
            forgetting_convention: "retention_minus_adaptation".to_string(),
            adap_acc: out.metrics.adap_acc,
            gen_acc: out.metrics.gen_acc,
            for_acc: out.metrics.for_acc,
            per_subject_adaptation: out.metrics_log.adaptation.clone(),
            per_subject_retention: out.metrics_log.retention.clone(),
            end_accuracies: out.metrics_log.end_accuracies.clone(),
            config_echo,
        }
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Data(format!("metrics serialization: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::stream::{generate_synthetic, SyntheticConfig};

    fn toy_model_config() -> ModelConfig {
        ModelConfig {
            input_channels: 2,
            segment_len: 32,
            architecture: Architecture::Desk,
            embedding_dim: 16,
            num_classes: 2,
            attention: false,
            predictor_hidden: 16,
        }
    }

    fn toy_synthetic() -> SyntheticConfig {
        SyntheticConfig {
            n_subjects: 2,
            num_classes: 2,
            channels: 2,
            segment_len: 32,
            segments_per_run: 8,
            runs_per_class: 1,
            transition_width: 0,
            noise_std: 0.0,
            seed: 5,
            sample_rate_hz: 32.0,
            class_bands: vec![(3.0, 5.0), (9.0, 11.0)],
            test_segments_per_class: 4,
            source_segments_per_class: 16,
            source_subjects: 2,
            gain_range: (0.95, 1.05),
            subject_band_shift_hz: 0.0,
        }
    }

    #[test]
    fn metrics_arithmetic_examples() {
        let log = MetricsLog {
            adaptation: vec![0.8, 0.6],
            retention: vec![0.7],
            end_accuracies: vec![0.7, 0.6],
            global_test_accuracy: 0.65,
        };
        let m = compute_metrics(&log).unwrap();
        assert!((m.for_acc - (-0.1)).abs() < 1e-12);
        assert!((m.adap_acc - 0.7).abs() < 1e-12);
        assert!((m.gen_acc - 0.65).abs() < 1e-12);
        // m_j = a_j for all j -> zero forgetting
        let log = MetricsLog {
            adaptation: vec![0.5, 0.5, 0.5],
            retention: vec![0.5, 0.5],
            end_accuracies: vec![0.5; 3],
            global_test_accuracy: 1.0,
        };
        assert_eq!(compute_metrics(&log).unwrap().for_acc, 0.0);
        assert_eq!(compute_metrics(&log).unwrap().gen_acc, 1.0);
    }

    #[test]
    fn incomplete_log_is_contract_violation() {
        let log = MetricsLog {
            adaptation: vec![0.8, 0.6, 0.7],
            retention: vec![0.7],
            end_accuracies: vec![],
            global_test_accuracy: 0.0,
        };
        assert!(compute_metrics(&log).is_err());
    }

    #[test]
    fn pretrain_reaches_full_accuracy_on_separable_source() {
        let data = generate_synthetic(&toy_synthetic()).unwrap();
        let (bundle, acc) = pretrain_source(
            &toy_model_config(),
            &PretrainConfig { epochs: 10, learning_rate: 1e-2, ..PretrainConfig::default() },
            &data.source,
            3,
        )
        .unwrap();
        assert!(acc >= 0.999, "train accuracy {acc}");
        assert!(accuracy(&bundle, &data.test).unwrap() > 0.9);
    }

    #[test]
    fn pretrain_zero_epochs_returns_initialization() {
        let data = generate_synthetic(&toy_synthetic()).unwrap();
        let cfg = toy_model_config();
        let (bundle, _) = pretrain_source(
            &cfg,
            &PretrainConfig { epochs: 0, ..PretrainConfig::default() },
            &data.source,
            3,
        )
        .unwrap();
        assert_eq!(bundle, init_model(&cfg, 3).unwrap());
    }

    #[test]
    fn pretrain_is_deterministic() {
        let data = generate_synthetic(&toy_synthetic()).unwrap();
        let run = || {
            pretrain_source(
                &toy_model_config(),
                &PretrainConfig { epochs: 2, ..PretrainConfig::default() },
                &data.source,
                11,
            )
            .unwrap()
            .0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pretrain_rejects_out_of_range_labels() {
        let data = generate_synthetic(&toy_synthetic()).unwrap();
        let mut bad = data.source.clone();
        bad.labels[0] = 9;
        assert!(matches!(
            pretrain_source(&toy_model_config(), &PretrainConfig::default(), &bad, 0),
            Err(Error::Data(_))
        ));
    }

    fn quick_train_config(variant: Variant) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            meta_steps: 2,
            meta_learning_rate: 1e-3,
            replay_batch: 8,
            current_batch_cap: 8,
            ssl: SslConfig {
                inner_steps: 1,
                inner_learning_rate: 1e-3,
                ..SslConfig::default()
            },
            kmeans: KMeansConfig { k: 2, restarts: 2, ..KMeansConfig::default() },
            menm: MenmConfig { capacity: 24, ..MenmConfig::default() },
            variant,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    fn quick_run(variant: Variant) -> RunOutput {
        let data = generate_synthetic(&toy_synthetic()).unwrap();
        let (bundle, _) = pretrain_source(
            &toy_model_config(),
            &PretrainConfig { epochs: 5, learning_rate: 1e-2, ..PretrainConfig::default() },
            &data.source,
            3,
        )
        .unwrap();
        run_stream(
            &bundle,
            RunInputs {
                stream: &data.stream,
                stream_meta: &data.stream_meta,
                test: &data.test,
            },
            &quick_train_config(variant),
        )
        .unwrap()
    }

    #[test]
    fn t0_stores_batch_directly() {
        let data = generate_synthetic(&toy_synthetic()).unwrap();
        let (bundle, _) = pretrain_source(
            &toy_model_config(),
            &PretrainConfig { epochs: 3, learning_rate: 1e-2, ..PretrainConfig::default() },
            &data.source,
            3,
        )
        .unwrap();
        let config = quick_train_config(Variant::Full);
        let mut state = StreamState::new(&bundle, &config);
        let mut cursor = StreamCursor::new(&data.stream);
        let batch = cursor.next_batch(config.batch_size).unwrap();
        let out = process_stream_batch(&mut state, &data.stream, &batch, &config).unwrap();
        assert!(out.events.iter().any(|e| e == "t0_direct_store"));
        assert_eq!(state.memory.len(), batch.len());
        let current = out.current.unwrap();
        assert!(current.iter().all(|p| p.label < 2));
        // subsequent batch merges with memory
        let batch2 = cursor.next_batch(config.batch_size).unwrap();
        let out2 = process_stream_batch(&mut state, &data.stream, &batch2, &config).unwrap();
        let combined = out2.current.as_ref().map(|c| c.len()).unwrap_or(0) + state.memory.len();
        assert_eq!(combined, batch2.len() + state.memory.len());
    }

    #[test]
    fn run_is_deterministic_and_single_pass() {
        let a = quick_run(Variant::Full);
        let b = quick_run(Variant::Full);
        assert_eq!(a.metrics_log, b.metrics_log);
        assert_eq!(a.final_model, b.final_model);
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(sa.inner_loss.to_bits(), sb.inner_loss.to_bits());
            assert_eq!(sa.meta_loss.to_bits(), sb.meta_loss.to_bits());
        }
        // single pass
        assert!(a.consumed_counts.iter().all(|&c| c <= 1));
        let consumed: u32 = a.consumed_counts.iter().sum();
        assert_eq!(consumed as usize + a.dropped_tail, a.consumed_counts.len());
    }

    #[test]
    fn variants_share_pseudo_labels_until_first_enhancement() {
        let data = generate_synthetic(&toy_synthetic()).unwrap();
        let (bundle, _) = pretrain_source(
            &toy_model_config(),
            &PretrainConfig { epochs: 3, learning_rate: 1e-2, ..PretrainConfig::default() },
            &data.source,
            3,
        )
        .unwrap();
        let mut labels_by_variant = Vec::new();
        for variant in [Variant::Full, Variant::NoMenm] {
            let config = quick_train_config(variant);
            let mut state = StreamState::new(&bundle, &config);
            let mut cursor = StreamCursor::new(&data.stream);
            let batch = cursor.next_batch(config.batch_size).unwrap();
            let out = process_stream_batch(&mut state, &data.stream, &batch, &config).unwrap();
            labels_by_variant
                .push(out.current.unwrap().iter().map(|p| p.label).collect::<Vec<_>>());
        }
        assert_eq!(labels_by_variant[0], labels_by_variant[1]);
    }

    #[test]
    fn memory_capacity_invariant_across_run() {
        let out = quick_run(Variant::Full);
        for s in &out.steps {
            assert!(s.buffer_size <= 24);
        }
        let out = quick_run(Variant::RandomMemory);
        for s in &out.steps {
            assert!(s.buffer_size <= 24);
            assert_eq!(s.memory_policy, "random");
        }
    }

    #[test]
    fn run_id_is_deterministic_and_config_sensitive() {
        let a = run_id(b"config-a");
        assert_eq!(a, run_id(b"config-a"));
        assert_ne!(a, run_id(b"config-b"));
        assert_eq!(a.len(), 12);
    }
}

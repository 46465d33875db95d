//! Fast self-supervised adaptation to the current batch.
//!
//! The inner loop clones the model and fits it to the incoming segments
//! with a future-prediction contrastive loss: the predictor maps each
//! embedding to a guess at its successor, the true successor is the
//! positive, and the remaining predictions are the negatives. No data
//! augmentation touches the signals. An instance-discrimination variant
//! (two jittered views per sample, NT-Xent) backs the no-SSM ablation.

use crate::error::{Error, Result};
use crate::model::{
    self, clone_model, forward_features_graph, forward_predictor_graph, update_bn_buffers,
    Mode, ModelBundle, ParamSet,
};
use crate::numerics::tape::{NceMode, NodeId, Tape};
use crate::numerics::tensor::Tensor;
use crate::numerics::{AdamConfig, AdamState, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    /// Contrastive temperature.
    pub temperature: Real,
    /// Adam steps per batch in the inner loop.
    pub inner_steps: usize,
    pub inner_learning_rate: Real,
    pub inner_weight_decay: Real,
    /// L2-normalize embeddings and predictions before any dot product.
    pub normalize_embeddings: bool,
    pub denominator: NceMode,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            temperature: 0.5,
            inner_steps: 5,
            inner_learning_rate: 1e-4,
            inner_weight_decay: 1e-4,
            normalize_embeddings: true,
            denominator: NceMode::InfoNce,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::config("ssl temperature must be > 0"));
        }
        if self.inner_learning_rate < 0.0 {
            return Err(Error::config("inner learning rate must be >= 0"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.inner_learning_rate,
            weight_decay: self.inner_weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Predict the successor embedding of a single `d`-vector.
pub fn predict_next(bundle: &ModelBundle, z: &[Real]) -> Result<Vec<Real>> {
    let mut tape = Tape::new();
    let input = tape.leaf(Tensor::new(vec![1, z.len()], z.to_vec())?)?;
    let g = forward_predictor_graph(&mut tape, bundle, input)?;
    Ok(tape.value(g.output).data().to_vec())
}

/// Append the predictive contrastive loss to a graph whose `z` node
/// holds `(B, d)` embeddings. Returns the loss node.
pub fn predictive_loss_graph(
    tape: &mut Tape,
    bundle: &ModelBundle,
    z: NodeId,
    config: &SslConfig,
) -> Result<NodeId> {
    let pred = forward_predictor_graph(tape, bundle, z)?;
    let (pn, zn) = if config.normalize_embeddings {
        (
            tape.l2_normalize_rows(pred.output)?,
            tape.l2_normalize_rows(z)?,
        )
    } else {
        (pred.output, z)
    };
    tape.predictive_nce(pn, zn, config.temperature, config.denominator)
}

/// The loss value for a batch of precomputed embeddings.
pub fn predictive_contrastive_loss(
    embeddings: &Tensor,
    bundle: &ModelBundle,
    config: &SslConfig,
) -> Result<Real> {
    config.validate()?;
    let mut tape = Tape::new();
    let z = tape.leaf(embeddings.clone())?;
    let loss = predictive_loss_graph(&mut tape, bundle, z, config)?;
    tape.value(loss).item()
}

/// Result of an inner-loop adaptation: the adapted clone plus the loss
/// on the batch before and after.
pub struct AdaptOutcome {
    pub adapted: ModelBundle,
    pub loss_before: Real,
    pub loss_after: Real,
}

fn batch_loss(bundle: &ModelBundle, batch: &Tensor, config: &SslConfig) -> Result<Real> {
    let mut tape = Tape::new();
    let input = tape.leaf(batch.clone())?;
    let features = forward_features_graph(&mut tape, bundle, input, Mode::Eval)?;
    let loss = predictive_loss_graph(&mut tape, bundle, features.output, config)?;
    tape.value(loss).item()
}

/// Adapt a clone of the model to one `(B, C, L)` batch with
/// `inner_steps` Adam steps on the predictive contrastive loss. The
/// input bundle is untouched; the clone's extractor and predictor are
/// both updated (the loss depends on both). Zero steps return the clone
/// unchanged (ablation use).
pub fn inner_adapt(
    bundle: &ModelBundle,
    batch: &Tensor,
    config: &SslConfig,
    _seed: u64,
) -> Result<AdaptOutcome> {
    config.validate()?;
    if batch.shape().len() != 3 || batch.shape()[0] < 2 {
        return Err(Error::contract("inner_adapt: batch must be (B >= 2, C, L)"));
    }
    let mut adapted = clone_model(bundle);
    let loss_before = batch_loss(&adapted, batch, config)?;
    let mut opt = AdamState::new(config.adam(), &adapted.params(ParamSet::ExtractorPredictor));
    for _ in 0..config.inner_steps {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone())?;
        let features = forward_features_graph(&mut tape, &adapted, input, Mode::Train)?;
        let pred = forward_predictor_graph(&mut tape, &adapted, features.output)?;
        let (pn, zn) = if config.normalize_embeddings {
            (
                tape.l2_normalize_rows(pred.output)?,
                tape.l2_normalize_rows(features.output)?,
            )
        } else {
            (pred.output, features.output)
        };
        let loss = tape.predictive_nce(pn, zn, config.temperature, config.denominator)?;
        let grads = tape.backward(loss)?;
        update_bn_buffers(&mut adapted, &tape, &features.bn_nodes);
        let param_ids: Vec<NodeId> = features
            .param_ids
            .iter()
            .chain(&pred.param_ids)
            .copied()
            .collect();
        let grad_refs: Vec<&Tensor> = param_ids.iter().map(|&id| grads.get(id)).collect();
        let mut params = adapted.params_mut(ParamSet::ExtractorPredictor);
        opt.step(&mut params, &grad_refs)?;
    }
    let loss_after = batch_loss(&adapted, batch, config)?;
    Ok(AdaptOutcome { adapted, loss_before, loss_after })
}

/// No-SSM ablation: adapt the extractor with an instance-discrimination
/// NT-Xent loss over two Gaussian-jittered views per sample (sigma is
/// 0.05 of the batch standard deviation). Fresh views are drawn each
/// step from the given seed.
pub fn inner_adapt_instance_discrimination(
    bundle: &ModelBundle,
    batch: &Tensor,
    config: &SslConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    config.validate()?;
    if batch.shape().len() != 3 || batch.shape()[0] < 2 {
        return Err(Error::contract("inner_adapt: batch must be (B >= 2, C, L)"));
    }
    let (b, c, l) = (batch.shape()[0], batch.shape()[1], batch.shape()[2]);
    let n = batch.len() as Real;
    let mean: Real = batch.data().iter().sum::<Real>() / n;
    let var: Real = batch.data().iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
    let sigma = 0.05 * var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapted = clone_model(bundle);
    let mut opt = AdamState::new(config.adam(), &adapted.params(ParamSet::Extractor));
    let make_views = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
        let mut data = Vec::with_capacity(2 * b * c * l);
        for s in 0..b {
            let sample = &batch.data()[s * c * l..(s + 1) * c * l];
            for _ in 0..2 {
                for &v in sample {
                    // Box-Muller keeps us off rand_distr for one draw
                    let u1: Real = rng.gen_range(1e-12..1.0);
                    let u2: Real = rng.gen_range(0.0..1.0);
                    let g = (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI as Real * u2).cos();
                    data.push(v + sigma * g);
                }
            }
        }
        Tensor::new(vec![2 * b, c, l], data)
    };
    let view_loss = |bundle: &ModelBundle, views: &Tensor| -> Result<Real> {
        let mut tape = Tape::new();
        let input = tape.leaf(views.clone())?;
        let features = forward_features_graph(&mut tape, bundle, input, Mode::Eval)?;
        let zn = if config.normalize_embeddings {
            tape.l2_normalize_rows(features.output)?
        } else {
            features.output
        };
        let loss = tape.ntxent(zn, config.temperature)?;
        tape.value(loss).item()
    };
    let first_views = make_views(&mut rng)?;
    let loss_before = view_loss(&adapted, &first_views)?;
    let mut views = first_views;
    for step in 0..config.inner_steps {
        if step > 0 {
            views = make_views(&mut rng)?;
        }
        let mut tape = Tape::new();
        let input = tape.leaf(views.clone())?;
        let features = forward_features_graph(&mut tape, &adapted, input, Mode::Train)?;
        let zn = if config.normalize_embeddings {
            tape.l2_normalize_rows(features.output)?
        } else {
            features.output
        };
        let loss = tape.ntxent(zn, config.temperature)?;
        let grads = tape.backward(loss)?;
        update_bn_buffers(&mut adapted, &tape, &features.bn_nodes);
        let grad_refs: Vec<&Tensor> =
            features.param_ids.iter().map(|&id| grads.get(id)).collect();
        let mut params = adapted.params_mut(ParamSet::Extractor);
        opt.step(&mut params, &grad_refs)?;
    }
    let loss_after = view_loss(&adapted, &views)?;
    Ok(AdaptOutcome { adapted, loss_before, loss_after })
}

/// Embeddings of a batch under the adapted model, normalized per config.
pub fn embed_for_clustering(
    bundle: &ModelBundle,
    batch: &Tensor,
    config: &SslConfig,
) -> Result<Tensor> {
    model::embed_batch(bundle, batch, config.normalize_embeddings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Architecture, LayerSpec, ModelConfig};
    use crate::numerics::{finite_difference_gradient, uniform_tensor};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_channels: 2,
            segment_len: 16,
            architecture: Architecture::Custom(vec![
                LayerSpec::Conv1d { in_channels: 2, out_channels: 4, kernel: 3, same_padding: true },
                LayerSpec::MaxPool1d { kernel: 4, stride: 4 },
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 16, outputs: 8 },
            ]),
            embedding_dim: 8,
            num_classes: 2,
            attention: false,
            predictor_hidden: 8,
        }
    }

    fn identity_predictor_bundle(d: usize) -> ModelBundle {
        let mut config = tiny_config();
        config.predictor_hidden = 0;
        config.embedding_dim = d;
        config.architecture = Architecture::Custom(vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 32, outputs: d },
        ]);
        let mut bundle = init_model(&config, 0).unwrap();
        let crate::model::Layer::Dense(h) = &mut bundle.predictor[0] else {
            panic!("expected single dense predictor");
        };
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        h.weight = Tensor::new(vec![d, d], w).unwrap();
        h.bias = Tensor::zeros(vec![d]);
        bundle
    }

    #[test]
    fn identity_predictor_returns_input() {
        let bundle = identity_predictor_bundle(4);
        let z = vec![0.3, -0.2, 0.9, 0.0];
        let out = predict_next(&bundle, &z).unwrap();
        for (a, b) in out.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_predictor_returns_zero() {
        let mut bundle = identity_predictor_bundle(4);
        let crate::model::Layer::Dense(h) = &mut bundle.predictor[0] else {
            panic!();
        };
        h.weight = Tensor::zeros(vec![4, 4]);
        let out = predict_next(&bundle, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predictor_norm_gradient_matches_finite_differences() {
        // d ||h(z)||^2 / d h-params
        let config = ModelConfig { predictor_hidden: 3, ..tiny_config() };
        let bundle = init_model(&config, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = uniform_tensor(&mut rng, vec![2, 8], -1.0, 1.0);
        let h_params: Vec<Tensor> = bundle
            .predictor
            .iter()
            .flat_map(|l| match l {
                crate::model::Layer::Dense(d) => vec![d.weight.clone(), d.bias.clone()],
                _ => vec![],
            })
            .collect();
        let loss_of = |ps: &[Tensor]| -> Result<Real> {
            let mut b = bundle.clone();
            let mut i = 0;
            for l in &mut b.predictor {
                if let crate::model::Layer::Dense(d) = l {
                    d.weight = ps[i].clone();
                    d.bias = ps[i + 1].clone();
                    i += 2;
                }
            }
            let mut tape = Tape::new();
            let input = tape.leaf(z.clone())?;
            let g = forward_predictor_graph(&mut tape, &b, input)?;
            let sq = tape.mul(g.output, g.output)?;
            let loss = tape.sum_all(sq)?;
            tape.value(loss).item()
        };
        let mut tape = Tape::new();
        let input = tape.leaf(z.clone()).unwrap();
        let g = forward_predictor_graph(&mut tape, &bundle, input).unwrap();
        let sq = tape.mul(g.output, g.output).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let fd = finite_difference_gradient(loss_of, &h_params, 1e-6).unwrap();
        for (id, fd_g) in g.param_ids.iter().zip(&fd) {
            let an = grads.get(*id);
            let scale = an
                .data()
                .iter()
                .chain(fd_g.data())
                .fold(1e-6 as Real, |m, &v| m.max(v.abs()));
            for (&a, &f) in an.data().iter().zip(fd_g.data()) {
                assert!((a - f).abs() / scale < 1e-4, "analytic {a} vs fd {f}");
            }
        }
    }

    #[test]
    fn identical_normalized_embeddings_give_ln_b() {
        let d = 4;
        let bundle = identity_predictor_bundle(d);
        let row = vec![0.5; d]; // unit norm
        let rows: Vec<Vec<Real>> = (0..32).map(|_| row.clone()).collect();
        let z = Tensor::from_rows(&rows).unwrap();
        let cfg = SslConfig::default();
        let loss = predictive_contrastive_loss(&z, &bundle, &cfg).unwrap();
        assert!((loss - (32.0 as Real).ln()).abs() < 1e-9, "loss {loss}");
    }

    /// Independent double-loop reference for the predictive loss.
    fn naive_loss(p: &Tensor, z: &Tensor, tau: Real, mode: NceMode) -> Real {
        let b = p.shape()[0];
        let dot = |a: &[Real], c: &[Real]| a.iter().zip(c).map(|(x, y)| x * y).sum::<Real>();
        let mut total = 0.0;
        for n in 0..b - 1 {
            let pos = (dot(p.row(n), z.row(n + 1))) / tau;
            let mut denom = 0.0;
            match mode {
                NceMode::InfoNce => {
                    denom += pos.exp();
                    for m in (0..b).filter(|&m| m != n) {
                        denom += (dot(p.row(n), p.row(m)) / tau).exp();
                    }
                }
                NceMode::PaperLiteral => {
                    for m in 0..b {
                        denom += (dot(p.row(n), p.row(m)) / tau).exp();
                    }
                }
            }
            total += denom.ln() - pos;
        }
        total / (b - 1) as Real
    }

    #[test]
    fn loss_matches_naive_reference_and_modes_behave() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..20 {
            let b = rng.gen_range(2..9);
            let z = uniform_tensor(&mut rng, vec![b, 5], -1.0, 1.0);
            let p = uniform_tensor(&mut rng, vec![b, 5], -1.0, 1.0);
            for mode in [NceMode::InfoNce, NceMode::PaperLiteral] {
                let mut tape = Tape::new();
                let zn = tape.leaf(z.clone()).unwrap();
                let pn = tape.leaf(p.clone()).unwrap();
                let loss = tape.predictive_nce(pn, zn, 0.5, mode).unwrap();
                let got = tape.value(loss).item().unwrap();
                let want = naive_loss(&p, &z, 0.5, mode);
                assert!((got - want).abs() < 1e-10, "trial {trial}: {got} vs {want}");
                if mode == NceMode::InfoNce {
                    assert!(got >= 0.0);
                } else {
                    assert!(got.is_finite());
                }
            }
        }
    }

    #[test]
    fn normalization_makes_loss_scale_invariant() {
        let bundle = identity_predictor_bundle(6);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let z = uniform_tensor(&mut rng, vec![8, 6], -1.0, 1.0);
        let scaled = Tensor::new(
            vec![8, 6],
            z.data().iter().map(|v| v * 41.0).collect(),
        )
        .unwrap();
        let cfg = SslConfig::default();
        let a = predictive_contrastive_loss(&z, &bundle, &cfg).unwrap();
        let b = predictive_contrastive_loss(&scaled, &bundle, &cfg).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn zero_steps_returns_unchanged_clone() {
        let bundle = init_model(&tiny_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = uniform_tensor(&mut rng, vec![6, 2, 16], -1.0, 1.0);
        let cfg = SslConfig { inner_steps: 0, ..SslConfig::default() };
        let out = inner_adapt(&bundle, &batch, &cfg, 0).unwrap();
        assert_eq!(out.adapted, bundle);
        assert_eq!(out.loss_before, out.loss_after);
    }

    #[test]
    fn adaptation_reduces_loss_on_most_batches() {
        let bundle = init_model(&tiny_config(), 9).unwrap();
        let cfg = SslConfig {
            inner_steps: 5,
            inner_learning_rate: 1e-2,
            ..SslConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut improved = 0;
        let trials = 50;
        for _ in 0..trials {
            let batch = uniform_tensor(&mut rng, vec![8, 2, 16], -1.0, 1.0);
            let out = inner_adapt(&bundle, &batch, &cfg, 0).unwrap();
            if out.loss_after <= out.loss_before {
                improved += 1;
            }
        }
        assert!(improved * 10 >= trials * 9, "only {improved}/{trials} improved");
    }

    #[test]
    fn original_bundle_untouched_by_adaptation() {
        let bundle = init_model(&tiny_config(), 31).unwrap();
        let before = bundle.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = uniform_tensor(&mut rng, vec![4, 2, 16], -1.0, 1.0);
        let cfg = SslConfig { inner_learning_rate: 1e-2, ..SslConfig::default() };
        let _ = inner_adapt(&bundle, &batch, &cfg, 0).unwrap();
        assert_eq!(bundle, before);
        let _ = inner_adapt_instance_discrimination(&bundle, &batch, &cfg, 0).unwrap();
        assert_eq!(bundle, before);
    }

    #[test]
    fn instance_discrimination_leaves_predictor_alone() {
        let bundle = init_model(&tiny_config(), 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = uniform_tensor(&mut rng, vec![4, 2, 16], -1.0, 1.0);
        let cfg = SslConfig { inner_learning_rate: 1e-2, ..SslConfig::default() };
        let out = inner_adapt_instance_discrimination(&bundle, &batch, &cfg, 1).unwrap();
        assert_eq!(out.adapted.predictor, bundle.predictor);
        assert_ne!(out.adapted.extractor, bundle.extractor);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let bundle = init_model(&tiny_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = uniform_tensor(&mut rng, vec![1, 2, 16], -1.0, 1.0);
        assert!(inner_adapt(&bundle, &batch, &SslConfig::default(), 0).is_err());
    }

    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}

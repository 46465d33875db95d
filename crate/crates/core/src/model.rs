//! The network bundle: feature extractor, linear classifier, and the
//! embedding predictor used by the self-supervised inner loop.
//!
//! Two presets are provided. `desk` is the small CPU-friendly stack used
//! by the test harness; `paper` is the full residual architecture with
//! temporal attention. Custom layer lists are accepted as well.

use crate::error::{Error, Result};
use crate::numerics::tape::{NodeId, Padding, Tape};
use crate::numerics::tensor::Tensor;
use crate::numerics::{uniform_tensor, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SSOC";
const CHECKPOINT_VERSION: u16 = 1;

/// Train/eval switch; only batch normalization behaves differently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Serializable layer description for custom architectures.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        same_padding: bool,
    },
    BatchNorm {
        channels: usize,
    },
    MaxPool1d {
        kernel: usize,
        stride: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Flatten,
    Attention {
        channels: usize,
    },
    /// conv-bn-relu-conv-bn with an identity (or 1x1-conv) shortcut,
    /// followed by a ReLU. Pooling is a separate layer.
    Residual {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
}

/// Architecture selection.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Desk,
    Paper,
    Custom(Vec<LayerSpec>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input channels per segment.
    pub input_channels: usize,
    /// Samples per segment.
    pub segment_len: usize,
    pub architecture: Architecture,
    /// Output dimension of the projection head.
    pub embedding_dim: usize,
    pub num_classes: usize,
    /// Insert a temporal self-attention layer (preset-dependent spot).
    pub attention: bool,
    /// Hidden width of the predictor network; 0 means a single linear
    /// map.
    pub predictor_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(4, 128, 4)
    }
}

impl ModelConfig {
    /// Small CPU-scale stack: conv(8, k7) -> maxpool(4,4) -> FC 64 ->
    /// ReLU -> projection to 32.
    pub fn desk(channels: usize, segment_len: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_channels: channels,
            segment_len,
            architecture: Architecture::Desk,
            embedding_dim: 32,
            num_classes,
            attention: false,
            predictor_hidden: 32,
        }
    }

    /// Full-fidelity stack: conv + three residual blocks (kernels 15,
    /// 21, 43, each pooled by 4) + attention + FC 1024/512/256 +
    /// projection to 128.
    pub fn paper(channels: usize, segment_len: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_channels: channels,
            segment_len,
            architecture: Architecture::Paper,
            embedding_dim: 128,
            num_classes,
            attention: true,
            predictor_hidden: 128,
        }
    }

    /// Expand the architecture into a concrete layer list ending at the
    /// projection head.
    pub fn extractor_specs(&self) -> Result<Vec<LayerSpec>> {
        let c = self.input_channels;
        let l = self.segment_len;
        let specs = match &self.architecture {
            Architecture::Desk => {
                let mut s = vec![
                    LayerSpec::Conv1d {
                        in_channels: c,
                        out_channels: 8,
                        kernel: 7,
                        same_padding: true,
                    },
                    LayerSpec::MaxPool1d { kernel: 4, stride: 4 },
                ];
                if self.attention {
                    s.push(LayerSpec::Attention { channels: 8 });
                }
                let pooled = crate::numerics::kernels::pool_out_len(l, 4, 4);
                s.extend([
                    LayerSpec::Flatten,
                    LayerSpec::Dense { inputs: 8 * pooled, outputs: 64 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { inputs: 64, outputs: self.embedding_dim },
                ]);
                s
            }
            Architecture::Paper => {
                let mut s = vec![LayerSpec::Conv1d {
                    in_channels: c,
                    out_channels: 32,
                    kernel: 7,
                    same_padding: true,
                }];
                for (in_ch, out_ch, kernel) in [(32, 32, 15), (32, 64, 21), (64, 64, 43)] {
                    s.push(LayerSpec::Residual {
                        in_channels: in_ch,
                        out_channels: out_ch,
                        kernel,
                    });
                    s.push(LayerSpec::MaxPool1d { kernel: 4, stride: 4 });
                }
                if self.attention {
                    s.push(LayerSpec::Attention { channels: 64 });
                }
                let mut pooled = l;
                for _ in 0..3 {
                    pooled = crate::numerics::kernels::pool_out_len(pooled, 4, 4);
                }
                s.extend([
                    LayerSpec::Flatten,
                    LayerSpec::Dense { inputs: 64 * pooled, outputs: 1024 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { inputs: 1024, outputs: 512 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { inputs: 512, outputs: 256 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { inputs: 256, outputs: self.embedding_dim },
                ]);
                s
            }
            Architecture::Custom(list) => list.clone(),
        };
        Ok(specs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::config("embedding_dim must be > 0"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if self.input_channels == 0 || self.segment_len == 0 {
            return Err(Error::config("input_channels and segment_len must be > 0"));
        }
        // Walk the layer list symbolically and confirm it ends in a
        // dense output of embedding_dim.
        let out = infer_output(&self.extractor_specs()?, self.input_channels, self.segment_len)?;
        match out {
            ShapeState::Flat(d) if d == self.embedding_dim => Ok(()),
            ShapeState::Flat(d) => Err(Error::config(format!(
                "extractor produces {d}-dim output, config says embedding_dim {}",
                self.embedding_dim
            ))),
            ShapeState::Signal(c, l) => Err(Error::config(format!(
                "extractor ends in a ({c}, {l}) signal; add a flatten/dense head"
            ))),
        }
    }
}

enum ShapeState {
    Signal(usize, usize),
    Flat(usize),
}

fn infer_output(specs: &[LayerSpec], c: usize, l: usize) -> Result<ShapeState> {
    let mut state = ShapeState::Signal(c, l);
    for spec in specs {
        state = match (spec, state) {
            (
                LayerSpec::Conv1d { in_channels, out_channels, kernel, same_padding },
                ShapeState::Signal(c, l),
            ) => {
                if *in_channels != c {
                    return Err(Error::config(format!(
                        "conv1d expects {in_channels} channels, input has {c}"
                    )));
                }
                let pad = if *same_padding { (kernel - 1) / 2 } else { 0 };
                if l + 2 * pad < *kernel {
                    return Err(Error::config("conv1d kernel longer than padded input"));
                }
                ShapeState::Signal(
                    *out_channels,
                    crate::numerics::kernels::conv_out_len(l, *kernel, pad),
                )
            }
            (LayerSpec::BatchNorm { channels }, ShapeState::Signal(c, l)) if *channels == c => {
                ShapeState::Signal(c, l)
            }
            (LayerSpec::MaxPool1d { kernel, stride }, ShapeState::Signal(c, l)) => {
                let out = crate::numerics::kernels::pool_out_len(l, *kernel, *stride);
                if out == 0 {
                    return Err(Error::config("maxpool kernel longer than input"));
                }
                ShapeState::Signal(c, out)
            }
            (LayerSpec::Attention { channels }, ShapeState::Signal(c, l)) if *channels == c => {
                ShapeState::Signal(c, l)
            }
            (
                LayerSpec::Residual { in_channels, out_channels, kernel: _ },
                ShapeState::Signal(c, l),
            ) if *in_channels == c => ShapeState::Signal(*out_channels, l),
            (LayerSpec::Flatten, ShapeState::Signal(c, l)) => ShapeState::Flat(c * l),
            (LayerSpec::Dense { inputs, outputs }, ShapeState::Flat(f)) if *inputs == f => {
                ShapeState::Flat(*outputs)
            }
            (LayerSpec::Relu, s) => s,
            (spec, _) => {
                return Err(Error::config(format!(
                    "layer {spec:?} incompatible with input shape"
                )))
            }
        };
    }
    Ok(state)
}

// ── Parameterized layers ────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<Real>,
    pub running_var: Vec<Real>,
    pub momentum: Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv1dLayer,
    pub bn1: BatchNormLayer,
    pub conv2: Conv1dLayer,
    pub bn2: BatchNormLayer,
    pub shortcut: Option<Conv1dLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv1d(Conv1dLayer),
    BatchNorm(BatchNormLayer),
    MaxPool1d { kernel: usize, stride: usize },
    Dense(DenseLayer),
    Relu,
    Flatten,
    Attention(AttentionLayer),
    Residual(ResidualBlock),
}

fn init_conv(
    rng: &mut ChaCha8Rng,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    padding: Padding,
) -> Conv1dLayer {
    let bound = 1.0 / ((in_ch * kernel) as Real).sqrt();
    Conv1dLayer {
        weight: uniform_tensor(rng, vec![out_ch, in_ch, kernel], -bound, bound),
        bias: uniform_tensor(rng, vec![out_ch], -bound, bound),
        padding,
    }
}

fn init_dense(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> DenseLayer {
    let bound = 1.0 / (inputs as Real).sqrt();
    DenseLayer {
        weight: uniform_tensor(rng, vec![inputs, outputs], -bound, bound),
        bias: uniform_tensor(rng, vec![outputs], -bound, bound),
    }
}

fn init_bn(channels: usize) -> BatchNormLayer {
    BatchNormLayer {
        gamma: Tensor::new(vec![channels], vec![1.0; channels]).expect("const shape"),
        beta: Tensor::zeros(vec![channels]),
        running_mean: vec![0.0; channels],
        running_var: vec![1.0; channels],
        momentum: 0.1,
    }
}

fn init_layer(rng: &mut ChaCha8Rng, spec: &LayerSpec) -> Layer {
    match spec {
        LayerSpec::Conv1d { in_channels, out_channels, kernel, same_padding } => {
            let padding = if *same_padding { Padding::Same } else { Padding::Valid };
            Layer::Conv1d(init_conv(rng, *in_channels, *out_channels, *kernel, padding))
        }
        LayerSpec::BatchNorm { channels } => Layer::BatchNorm(init_bn(*channels)),
        LayerSpec::MaxPool1d { kernel, stride } => {
            Layer::MaxPool1d { kernel: *kernel, stride: *stride }
        }
        LayerSpec::Dense { inputs, outputs } => Layer::Dense(init_dense(rng, *inputs, *outputs)),
        LayerSpec::Relu => Layer::Relu,
        LayerSpec::Flatten => Layer::Flatten,
        LayerSpec::Attention { channels } => {
            let bound = 1.0 / (*channels as Real).sqrt();
            Layer::Attention(AttentionLayer {
                wq: uniform_tensor(rng, vec![*channels, *channels], -bound, bound),
                wk: uniform_tensor(rng, vec![*channels, *channels], -bound, bound),
                wv: uniform_tensor(rng, vec![*channels, *channels], -bound, bound),
            })
        }
        LayerSpec::Residual { in_channels, out_channels, kernel } => {
            let shortcut = if in_channels != out_channels {
                Some(init_conv(rng, *in_channels, *out_channels, 1, Padding::Valid))
            } else {
                None
            };
            Layer::Residual(ResidualBlock {
                conv1: init_conv(rng, *in_channels, *out_channels, *kernel, Padding::Same),
                bn1: init_bn(*out_channels),
                conv2: init_conv(rng, *out_channels, *out_channels, *kernel, Padding::Same),
                bn2: init_bn(*out_channels),
                shortcut,
            })
        }
    }
}

// ── Bundle ──────────────────────────────────────────────────────────

/// Parameters of the feature extractor, the linear classifier and the
/// predictor head. Value-semantic: `clone()` yields a fully independent
/// copy.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub extractor: Vec<Layer>,
    pub classifier: DenseLayer,
    pub predictor: Vec<Layer>,
}

/// Deterministically initialize a bundle from a config and seed.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extractor: Vec<Layer> = config
        .extractor_specs()?
        .iter()
        .map(|s| init_layer(&mut rng, s))
        .collect();
    let classifier = init_dense(&mut rng, config.embedding_dim, config.num_classes);
    let d = config.embedding_dim;
    let predictor = if config.predictor_hidden == 0 {
        vec![Layer::Dense(init_dense(&mut rng, d, d))]
    } else {
        vec![
            Layer::Dense(init_dense(&mut rng, d, config.predictor_hidden)),
            Layer::Relu,
            Layer::Dense(init_dense(&mut rng, config.predictor_hidden, d)),
        ]
    };
    Ok(ModelBundle { config: config.clone(), extractor, classifier, predictor })
}

/// Independent copy of the bundle (an explicit name for `clone`, used
/// where the inner loop adapts a throwaway copy).
pub fn clone_model(bundle: &ModelBundle) -> ModelBundle {
    bundle.clone()
}

fn layer_params<'a>(layer: &'a Layer, out: &mut Vec<&'a Tensor>) {
    match layer {
        Layer::Conv1d(c) => out.extend([&c.weight, &c.bias]),
        Layer::BatchNorm(b) => out.extend([&b.gamma, &b.beta]),
        Layer::Dense(d) => out.extend([&d.weight, &d.bias]),
        Layer::Attention(a) => out.extend([&a.wq, &a.wk, &a.wv]),
        Layer::Residual(r) => {
            out.extend([&r.conv1.weight, &r.conv1.bias, &r.bn1.gamma, &r.bn1.beta]);
            out.extend([&r.conv2.weight, &r.conv2.bias, &r.bn2.gamma, &r.bn2.beta]);
            if let Some(s) = &r.shortcut {
                out.extend([&s.weight, &s.bias]);
            }
        }
        Layer::MaxPool1d { .. } | Layer::Relu | Layer::Flatten => {}
    }
}

fn layer_params_mut<'a>(layer: &'a mut Layer, out: &mut Vec<&'a mut Tensor>) {
    match layer {
        Layer::Conv1d(c) => out.extend([&mut c.weight, &mut c.bias]),
        Layer::BatchNorm(b) => out.extend([&mut b.gamma, &mut b.beta]),
        Layer::Dense(d) => out.extend([&mut d.weight, &mut d.bias]),
        Layer::Attention(a) => out.extend([&mut a.wq, &mut a.wk, &mut a.wv]),
        Layer::Residual(r) => {
            out.extend([&mut r.conv1.weight, &mut r.conv1.bias, &mut r.bn1.gamma, &mut r.bn1.beta]);
            out.extend([&mut r.conv2.weight, &mut r.conv2.bias, &mut r.bn2.gamma, &mut r.bn2.beta]);
            if let Some(s) = &mut r.shortcut {
                out.extend([&mut s.weight, &mut s.bias]);
            }
        }
        Layer::MaxPool1d { .. } | Layer::Relu | Layer::Flatten => {}
    }
}

/// Which parts of the bundle participate in an optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSet {
    /// Extractor only (instance-discrimination ablation).
    Extractor,
    /// Extractor + predictor: the self-supervised inner loop.
    ExtractorPredictor,
    /// Extractor + classifier: supervised training.
    ExtractorClassifier,
}

impl ModelBundle {
    pub fn params(&self, set: ParamSet) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.extractor {
            layer_params(l, &mut out);
        }
        match set {
            ParamSet::Extractor => {}
            ParamSet::ExtractorPredictor => {
                for l in &self.predictor {
                    layer_params(l, &mut out);
                }
            }
            ParamSet::ExtractorClassifier => {
                out.extend([&self.classifier.weight, &self.classifier.bias]);
            }
        }
        out
    }

    pub fn params_mut(&mut self, set: ParamSet) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.extractor {
            layer_params_mut(l, &mut out);
        }
        match set {
            ParamSet::Extractor => {}
            ParamSet::ExtractorPredictor => {
                for l in &mut self.predictor {
                    layer_params_mut(l, &mut out);
                }
            }
            ParamSet::ExtractorClassifier => {
                out.extend([&mut self.classifier.weight, &mut self.classifier.bias]);
            }
        }
        out
    }

    /// Every tensor in the bundle, parameters and BN buffers alike, in
    /// checkpoint order.
    fn all_state(&self) -> Vec<StateRef<'_>> {
        let mut out = Vec::new();
        for l in self.extractor.iter().chain(&self.predictor) {
            state_of_layer(l, &mut out);
        }
        out.push(StateRef::Param(&self.classifier.weight));
        out.push(StateRef::Param(&self.classifier.bias));
        out
    }
}

enum StateRef<'a> {
    Param(&'a Tensor),
    Buffer(&'a [Real]),
}

fn state_of_layer<'a>(layer: &'a Layer, out: &mut Vec<StateRef<'a>>) {
    fn push_bn<'a>(b: &'a BatchNormLayer, out: &mut Vec<StateRef<'a>>) {
        out.push(StateRef::Param(&b.gamma));
        out.push(StateRef::Param(&b.beta));
        out.push(StateRef::Buffer(&b.running_mean));
        out.push(StateRef::Buffer(&b.running_var));
    }
    match layer {
        Layer::Conv1d(c) => {
            out.push(StateRef::Param(&c.weight));
            out.push(StateRef::Param(&c.bias));
        }
        Layer::BatchNorm(b) => push_bn(b, out),
        Layer::Dense(d) => {
            out.push(StateRef::Param(&d.weight));
            out.push(StateRef::Param(&d.bias));
        }
        Layer::Attention(a) => {
            out.push(StateRef::Param(&a.wq));
            out.push(StateRef::Param(&a.wk));
            out.push(StateRef::Param(&a.wv));
        }
        Layer::Residual(r) => {
            out.push(StateRef::Param(&r.conv1.weight));
            out.push(StateRef::Param(&r.conv1.bias));
            push_bn(&r.bn1, out);
            out.push(StateRef::Param(&r.conv2.weight));
            out.push(StateRef::Param(&r.conv2.bias));
            push_bn(&r.bn2, out);
            if let Some(s) = &r.shortcut {
                out.push(StateRef::Param(&s.weight));
                out.push(StateRef::Param(&s.bias));
            }
        }
        Layer::MaxPool1d { .. } | Layer::Relu | Layer::Flatten => {}
    }
}

// ── Forward passes ──────────────────────────────────────────────────

/// Result of building a forward graph: the output node, the parameter
/// leaves in `params(set)` order, and the train-mode batch-norm nodes in
/// traversal order (for running-buffer updates).
pub struct ForwardGraph {
    pub output: NodeId,
    pub param_ids: Vec<NodeId>,
    pub bn_nodes: Vec<NodeId>,
}

fn forward_layer(
    tape: &mut Tape,
    layer: &Layer,
    input: NodeId,
    mode: Mode,
    param_ids: &mut Vec<NodeId>,
    bn_nodes: &mut Vec<NodeId>,
) -> Result<NodeId> {
    match layer {
        Layer::Conv1d(c) => {
            let w = tape.leaf(c.weight.clone())?;
            let b = tape.leaf(c.bias.clone())?;
            param_ids.extend([w, b]);
            tape.conv1d(input, w, b, c.padding)
        }
        Layer::BatchNorm(bn) => forward_bn(tape, bn, input, mode, param_ids, bn_nodes),
        Layer::MaxPool1d { kernel, stride } => tape.maxpool1d(input, *kernel, *stride),
        Layer::Dense(d) => {
            let w = tape.leaf(d.weight.clone())?;
            let b = tape.leaf(d.bias.clone())?;
            param_ids.extend([w, b]);
            tape.linear(input, w, b)
        }
        Layer::Relu => tape.relu(input),
        Layer::Flatten => tape.flatten(input),
        Layer::Attention(a) => {
            let wq = tape.leaf(a.wq.clone())?;
            let wk = tape.leaf(a.wk.clone())?;
            let wv = tape.leaf(a.wv.clone())?;
            param_ids.extend([wq, wk, wv]);
            tape.attention(input, wq, wk, wv)
        }
        Layer::Residual(r) => {
            let c1w = tape.leaf(r.conv1.weight.clone())?;
            let c1b = tape.leaf(r.conv1.bias.clone())?;
            param_ids.extend([c1w, c1b]);
            let mut h = tape.conv1d(input, c1w, c1b, r.conv1.padding)?;
            h = forward_bn(tape, &r.bn1, h, mode, param_ids, bn_nodes)?;
            h = tape.relu(h)?;
            let c2w = tape.leaf(r.conv2.weight.clone())?;
            let c2b = tape.leaf(r.conv2.bias.clone())?;
            param_ids.extend([c2w, c2b]);
            h = tape.conv1d(h, c2w, c2b, r.conv2.padding)?;
            h = forward_bn(tape, &r.bn2, h, mode, param_ids, bn_nodes)?;
            let skip = match &r.shortcut {
                Some(s) => {
                    let sw = tape.leaf(s.weight.clone())?;
                    let sb = tape.leaf(s.bias.clone())?;
                    param_ids.extend([sw, sb]);
                    tape.conv1d(input, sw, sb, s.padding)?
                }
                None => input,
            };
            let sum = tape.add(h, skip)?;
            tape.relu(sum)
        }
    }
}

fn forward_bn(
    tape: &mut Tape,
    bn: &BatchNormLayer,
    input: NodeId,
    mode: Mode,
    param_ids: &mut Vec<NodeId>,
    bn_nodes: &mut Vec<NodeId>,
) -> Result<NodeId> {
    let g = tape.leaf(bn.gamma.clone())?;
    let b = tape.leaf(bn.beta.clone())?;
    param_ids.extend([g, b]);
    let out = match mode {
        Mode::Train => {
            let n = tape.batchnorm_train(input, g, b, 1e-5)?;
            bn_nodes.push(n);
            n
        }
        Mode::Eval => tape.batchnorm_eval(input, g, b, 1e-5, &bn.running_mean, &bn.running_var)?,
    };
    Ok(out)
}

fn forward_layers(
    tape: &mut Tape,
    layers: &[Layer],
    input: NodeId,
    mode: Mode,
) -> Result<ForwardGraph> {
    let mut param_ids = Vec::new();
    let mut bn_nodes = Vec::new();
    let mut x = input;
    for layer in layers {
        x = forward_layer(tape, layer, x, mode, &mut param_ids, &mut bn_nodes)?;
    }
    Ok(ForwardGraph { output: x, param_ids, bn_nodes })
}

/// Apply one layer to an input node; the generic entry behind all
/// forward passes, exposed for layer-level tests.
pub fn apply_layer(tape: &mut Tape, layer: &Layer, input: NodeId, mode: Mode) -> Result<NodeId> {
    let mut param_ids = Vec::new();
    let mut bn_nodes = Vec::new();
    forward_layer(tape, layer, input, mode, &mut param_ids, &mut bn_nodes)
}

/// Build the extractor graph `z = f(x)` over a `(B, C, L)` input node.
pub fn forward_features_graph(
    tape: &mut Tape,
    bundle: &ModelBundle,
    input: NodeId,
    mode: Mode,
) -> Result<ForwardGraph> {
    forward_layers(tape, &bundle.extractor, input, mode)
}

/// Extend a feature graph with the classifier: `logits = phi(z)`. The
/// classifier parameter ids are appended after the extractor's, matching
/// `params(ParamSet::ExtractorClassifier)` order.
pub fn forward_logits_graph(
    tape: &mut Tape,
    bundle: &ModelBundle,
    input: NodeId,
    mode: Mode,
) -> Result<ForwardGraph> {
    let mut g = forward_layers(tape, &bundle.extractor, input, mode)?;
    let w = tape.leaf(bundle.classifier.weight.clone())?;
    let b = tape.leaf(bundle.classifier.bias.clone())?;
    g.param_ids.extend([w, b]);
    g.output = tape.linear(g.output, w, b)?;
    Ok(g)
}

/// Predictor graph `z_hat = h(z)` over a `(B, d)` node. Parameter ids
/// come back in predictor order.
pub fn forward_predictor_graph(
    tape: &mut Tape,
    bundle: &ModelBundle,
    input: NodeId,
) -> Result<ForwardGraph> {
    forward_layers(tape, &bundle.predictor, input, Mode::Eval)
}

/// After a train-mode forward pass, fold the tape's batch statistics
/// into the bundle's running buffers (momentum per layer).
pub fn update_bn_buffers(bundle: &mut ModelBundle, tape: &Tape, bn_nodes: &[NodeId]) {
    let mut idx = 0;
    let mut update = |bn: &mut BatchNormLayer| {
        if let Some(&node) = bn_nodes.get(idx) {
            if let Some((mean, var)) = tape.batchnorm_stats(node) {
                for (r, &m) in bn.running_mean.iter_mut().zip(mean) {
                    *r = (1.0 - bn.momentum) * *r + bn.momentum * m;
                }
                for (r, &v) in bn.running_var.iter_mut().zip(var) {
                    *r = (1.0 - bn.momentum) * *r + bn.momentum * v;
                }
            }
        }
        idx += 1;
    };
    for layer in &mut bundle.extractor {
        match layer {
            Layer::BatchNorm(bn) => update(bn),
            Layer::Residual(r) => {
                update(&mut r.bn1);
                update(&mut r.bn2);
            }
            _ => {}
        }
    }
}

// ── Convenience evaluation entry points ─────────────────────────────

/// Embeddings of a `(B, C, L)` batch in eval mode, optionally row-
/// normalized.
pub fn embed_batch(bundle: &ModelBundle, batch: &Tensor, normalize: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let input = tape.leaf(batch.clone())?;
    let g = forward_features_graph(&mut tape, bundle, input, Mode::Eval)?;
    let out = if normalize {
        tape.l2_normalize_rows(g.output)?
    } else {
        g.output
    };
    Ok(tape.value(out).clone())
}

/// Logits of a `(B, C, L)` batch in eval mode.
pub fn logits_batch(bundle: &ModelBundle, batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let input = tape.leaf(batch.clone())?;
    let g = forward_logits_graph(&mut tape, bundle, input, Mode::Eval)?;
    Ok(tape.value(g.output).clone())
}

// ── Checkpoint I/O ──────────────────────────────────────────────────

/// Write the bundle as a versioned binary blob: magic, format version,
/// config echo (JSON), then every parameter and buffer array in declared
/// order, little-endian f64.
pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config_json = serde_json::to_vec(&bundle.config)
        .map_err(|e| Error::Data(format!("config serialization: {e}")))?;
    f.write_all(&(config_json.len() as u32).to_le_bytes())?;
    f.write_all(&config_json)?;
    let state = bundle.all_state();
    f.write_all(&(state.len() as u32).to_le_bytes())?;
    for s in state {
        let values: &[Real] = match s {
            StateRef::Param(t) => t.data(),
            StateRef::Buffer(b) => b,
        };
        f.write_all(&(values.len() as u32).to_le_bytes())?;
        for v in values {
            f.write_all(&(*v as f64).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::data("checkpoint: bad magic"));
    }
    let version = read_u16(&mut f)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(format!("checkpoint: unsupported version {version}")));
    }
    let config_len = read_u32(&mut f)? as usize;
    let mut config_buf = vec![0u8; config_len];
    f.read_exact(&mut config_buf)?;
    let config: ModelConfig = serde_json::from_slice(&config_buf)
        .map_err(|e| Error::Data(format!("checkpoint: config echo: {e}")))?;
    let mut bundle = init_model(&config, 0)?;
    let n_arrays = read_u32(&mut f)? as usize;
    let mut arrays = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let len = read_u32(&mut f)? as usize;
        let mut vals = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            f.read_exact(&mut buf)
                .map_err(|_| Error::data("checkpoint: truncated payload"))?;
            vals.push(f64::from_le_bytes(buf) as Real);
        }
        arrays.push(vals);
    }
    restore_state(&mut bundle, &arrays)?;
    Ok(bundle)
}

fn restore_state(bundle: &mut ModelBundle, arrays: &[Vec<Real>]) -> Result<()> {
    let expected = bundle.all_state().len();
    if arrays.len() != expected {
        return Err(Error::data(format!(
            "checkpoint: expected {expected} arrays, found {}",
            arrays.len()
        )));
    }
    let mut idx = 0;
    fn copy_into(target: &mut [Real], arrays: &[Vec<Real>], idx: &mut usize) -> Result<()> {
        let a = &arrays[*idx];
        *idx += 1;
        if a.len() != target.len() {
            return Err(Error::data("checkpoint: array length mismatch"));
        }
        target.copy_from_slice(a);
        Ok(())
    }
    fn fill_bn(bn: &mut BatchNormLayer, arrays: &[Vec<Real>], idx: &mut usize) -> Result<()> {
        copy_into(bn.gamma.data_mut(), arrays, idx)?;
        copy_into(bn.beta.data_mut(), arrays, idx)?;
        copy_into(&mut bn.running_mean, arrays, idx)?;
        copy_into(&mut bn.running_var, arrays, idx)?;
        Ok(())
    }
    for layer in bundle.extractor.iter_mut().chain(bundle.predictor.iter_mut()) {
        match layer {
            Layer::Conv1d(c) => {
                copy_into(c.weight.data_mut(), arrays, &mut idx)?;
                copy_into(c.bias.data_mut(), arrays, &mut idx)?;
            }
            Layer::BatchNorm(bn) => fill_bn(bn, arrays, &mut idx)?,
            Layer::Dense(d) => {
                copy_into(d.weight.data_mut(), arrays, &mut idx)?;
                copy_into(d.bias.data_mut(), arrays, &mut idx)?;
            }
            Layer::Attention(a) => {
                copy_into(a.wq.data_mut(), arrays, &mut idx)?;
                copy_into(a.wk.data_mut(), arrays, &mut idx)?;
                copy_into(a.wv.data_mut(), arrays, &mut idx)?;
            }
            Layer::Residual(r) => {
                copy_into(r.conv1.weight.data_mut(), arrays, &mut idx)?;
                copy_into(r.conv1.bias.data_mut(), arrays, &mut idx)?;
                fill_bn(&mut r.bn1, arrays, &mut idx)?;
                copy_into(r.conv2.weight.data_mut(), arrays, &mut idx)?;
                copy_into(r.conv2.bias.data_mut(), arrays, &mut idx)?;
                fill_bn(&mut r.bn2, arrays, &mut idx)?;
                if let Some(s) = &mut r.shortcut {
                    copy_into(s.weight.data_mut(), arrays, &mut idx)?;
                    copy_into(s.bias.data_mut(), arrays, &mut idx)?;
                }
            }
            Layer::MaxPool1d { .. } | Layer::Relu | Layer::Flatten => {}
        }
    }
    copy_into(bundle.classifier.weight.data_mut(), arrays, &mut idx)?;
    copy_into(bundle.classifier.bias.data_mut(), arrays, &mut idx)?;
    Ok(())
}

fn read_u16(f: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    f.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

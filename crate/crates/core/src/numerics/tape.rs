//! Reverse-mode automatic differentiation on an operation tape.
//!
//! A [`Tape`] records every primitive operation in execution order; node
//! values are computed eagerly at build time. [`Tape::backward`] runs the
//! reverse sweep from a scalar loss and returns one gradient tensor per
//! node, accumulating additively over fan-out. Parameters not reachable
//! from the loss keep zero gradients.
//!
//! Batched signal tensors are `(batch, channels, len)`; dense-stage
//! tensors are `(batch, features)`. Every builder verifies shapes and the
//! finiteness of its output, so a NaN or Inf anywhere surfaces as a
//! numerical error at the op that produced it.

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::tensor::Tensor;
use crate::numerics::Real;
use crate::par;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Zero-padding policy for 1-D convolutions (stride 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Pad `(kernel-1)/2` on both sides; output length equals input
    /// length. Requires an odd kernel.
    Same,
    /// No padding; output length is `len - kernel + 1`.
    Valid,
}

/// Denominator form of the predictive contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NceMode {
    /// Denominator holds the positive pair plus all other predictions:
    /// a normalized log-likelihood, always >= 0.
    #[serde(rename = "infonce")]
    InfoNce,
    /// Denominator sums over the predictions only, exactly as the loss
    /// is usually written; may go negative.
    #[serde(rename = "paper-literal")]
    PaperLiteral,
}

struct AttnCache {
    q: Vec<Real>,
    k: Vec<Real>,
    v: Vec<Real>,
    attn: Vec<Real>,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, Real),
    Relu(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        pad: usize,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: Real,
        mean: Vec<Real>,
        var: Vec<Real>,
        /// Train mode differentiates through the batch statistics;
        /// eval mode treats `mean`/`var` as constants.
        train: bool,
    },
    MaxPool1d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Flatten(NodeId),
    Attention {
        input: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        cache: Vec<AttnCache>,
    },
    L2NormRows {
        input: NodeId,
        norms: Vec<Real>,
    },
    SoftmaxRows(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    PredictiveNce {
        pred: NodeId,
        target: NodeId,
        tau: Real,
        mode: NceMode,
    },
    NtXent {
        views: NodeId,
        tau: Real,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<Real>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients per tape node after a backward sweep.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }
}

/// The operation tape. One tape per forward/backward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Batch statistics of a train-mode batch-norm node, for updating a
    /// layer's running buffers after the forward pass.
    pub fn batchnorm_stats(&self, id: NodeId) -> Option<(&[Real], &[Real])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                mean, var, train, ..
            } if *train => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, context: &str) -> Result<NodeId> {
        value.check_finite(context)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::contract(format!(
                "add: shape mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<Real> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::contract(format!(
                "mul: shape mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<Real> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: Real) -> Result<NodeId> {
        let ta = self.value(a);
        let data: Vec<Real> = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Scale(a, c), "scale")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let data: Vec<Real> = ta.data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Relu(a), "relu")
    }

    /// Fully connected layer: `(B, f_in) @ (f_in, f_out) + bias`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ti, tw, tb) = (self.value(input), self.value(weight), self.value(bias));
        let (ishape, wshape) = (ti.shape(), tw.shape());
        if ishape.len() != 2 || wshape.len() != 2 || ishape[1] != wshape[0] {
            return Err(Error::config(format!(
                "linear: input {:?} incompatible with weight {:?}",
                ishape, wshape
            )));
        }
        let (b, f_in, f_out) = (ishape[0], ishape[1], wshape[1]);
        if tb.shape() != [f_out] {
            return Err(Error::config(format!(
                "linear: bias {:?} expected [{}]",
                tb.shape(),
                f_out
            )));
        }
        let mut data = kernels::matmul(ti.data(), tw.data(), b, f_in, f_out);
        for r in 0..b {
            for (o, bv) in data[r * f_out..(r + 1) * f_out].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let t = Tensor::new(vec![b, f_out], data)?;
        self.push(t, Op::Linear { input, weight, bias }, "linear")
    }

    /// Batched 1-D convolution, stride 1. Input `(B, c_in, l)`, weight
    /// `(c_out, c_in, kernel)`, bias `(c_out)`.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        padding: Padding,
    ) -> Result<NodeId> {
        let (ti, tw, tb) = (self.value(input), self.value(weight), self.value(bias));
        let (ishape, wshape) = (ti.shape(), tw.shape());
        if ishape.len() != 3 || wshape.len() != 3 || ishape[1] != wshape[1] {
            return Err(Error::config(format!(
                "conv1d: input {:?} incompatible with weight {:?}",
                ishape, wshape
            )));
        }
        let (batch, c_in, l) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, kernel) = (wshape[0], wshape[2]);
        if tb.shape() != [c_out] {
            return Err(Error::config("conv1d: bias shape mismatch".to_string()));
        }
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => {
                if kernel % 2 == 0 {
                    return Err(Error::config("conv1d: same padding needs odd kernel"));
                }
                (kernel - 1) / 2
            }
        };
        if l + 2 * pad < kernel {
            return Err(Error::config(format!(
                "conv1d: length {l} too short for kernel {kernel}"
            )));
        }
        let l_out = kernels::conv_out_len(l, kernel, pad);
        let (x, w, bvals) = (ti.data(), tw.data(), tb.data());
        let per_sample = par::map_indexed(batch, |s| {
            kernels::conv1d_sample(
                &x[s * c_in * l..(s + 1) * c_in * l],
                w,
                bvals,
                c_in,
                l,
                c_out,
                kernel,
                pad,
            )
        });
        let mut data = Vec::with_capacity(batch * c_out * l_out);
        for sample in per_sample {
            data.extend_from_slice(&sample);
        }
        let t = Tensor::new(vec![batch, c_out, l_out], data)?;
        self.push(t, Op::Conv1d { input, weight, bias, pad }, "conv1d")
    }

    /// Batch normalization over `(B, C, L)` using batch statistics; the
    /// computed per-channel mean/var are retrievable for running-buffer
    /// updates via [`Tape::batchnorm_stats`].
    pub fn batchnorm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: Real,
    ) -> Result<NodeId> {
        let ti = self.value(input);
        let shape = ti.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::config("batchnorm: expected (B, C, L) input"));
        }
        let (b, c, l) = (shape[0], shape[1], shape[2]);
        let n = (b * l) as Real;
        let x = ti.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                let row = &x[(bi * c + ch) * l..(bi * c + ch + 1) * l];
                s += row.iter().sum::<Real>();
            }
            mean[ch] = s / n;
            let mut sq = 0.0;
            for bi in 0..b {
                let row = &x[(bi * c + ch) * l..(bi * c + ch + 1) * l];
                sq += row.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<Real>();
            }
            var[ch] = sq / n;
        }
        self.batchnorm_apply(input, gamma, beta, eps, mean, var, true)
    }

    /// Batch normalization in evaluation mode: normalizes with the given
    /// running statistics, which are treated as constants.
    pub fn batchnorm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: Real,
        running_mean: &[Real],
        running_var: &[Real],
    ) -> Result<NodeId> {
        self.batchnorm_apply(
            input,
            gamma,
            beta,
            eps,
            running_mean.to_vec(),
            running_var.to_vec(),
            false,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_apply(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: Real,
        mean: Vec<Real>,
        var: Vec<Real>,
        train: bool,
    ) -> Result<NodeId> {
        let (ti, tg, tb) = (self.value(input), self.value(gamma), self.value(beta));
        let shape = ti.shape().to_vec();
        let (b, c, l) = (shape[0], shape[1], shape[2]);
        if tg.shape() != [c] || tb.shape() != [c] || mean.len() != c || var.len() != c {
            return Err(Error::config("batchnorm: parameter shape mismatch"));
        }
        let x = ti.data();
        let (g, be) = (tg.data(), tb.data());
        let mut data = vec![0.0; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let inv = 1.0 / (var[ch] + eps).sqrt();
                let base = (bi * c + ch) * l;
                for t in 0..l {
                    data[base + t] = g[ch] * (x[base + t] - mean[ch]) * inv + be[ch];
                }
            }
        }
        let t = Tensor::new(shape, data)?;
        self.push(
            t,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                eps,
                mean,
                var,
                train,
            },
            "batchnorm",
        )
    }

    /// Max pooling over the temporal axis of `(B, C, L)`.
    pub fn maxpool1d(&mut self, input: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let ti = self.value(input);
        let shape = ti.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::config("maxpool1d: expected (B, C, L) input"));
        }
        let (b, c, l) = (shape[0], shape[1], shape[2]);
        let l_out = kernels::pool_out_len(l, kernel, stride);
        if l_out == 0 {
            return Err(Error::config(format!(
                "maxpool1d: length {l} shorter than kernel {kernel}"
            )));
        }
        let x = ti.data();
        let per_sample = par::map_indexed(b, |s| {
            let (vals, mut arg) =
                kernels::maxpool1d_sample(&x[s * c * l..(s + 1) * c * l], c, l, kernel, stride);
            for a in arg.iter_mut() {
                *a += s * c * l;
            }
            (vals, arg)
        });
        let mut data = Vec::with_capacity(b * c * l_out);
        let mut argmax = Vec::with_capacity(b * c * l_out);
        for (vals, arg) in per_sample {
            data.extend_from_slice(&vals);
            argmax.extend_from_slice(&arg);
        }
        let t = Tensor::new(vec![b, c, l_out], data)?;
        self.push(t, Op::MaxPool1d { input, argmax }, "maxpool1d")
    }

    /// Reshape `(B, C, L)` to `(B, C*L)`; the storage order is unchanged.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let ti = self.value(input);
        let shape = ti.shape();
        if shape.len() != 3 {
            return Err(Error::config("flatten: expected (B, C, L) input"));
        }
        let t = Tensor::new(vec![shape[0], shape[1] * shape[2]], ti.data().to_vec())?;
        self.push(t, Op::Flatten(input), "flatten")
    }

    /// Single-head scaled dot-product self-attention over the temporal
    /// axis of `(B, C, L)` features: each of the `L` time steps attends
    /// to all others with `C`-dimensional queries/keys/values. Output
    /// shape equals input shape.
    pub fn attention(
        &mut self,
        input: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
    ) -> Result<NodeId> {
        let ti = self.value(input);
        let shape = ti.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::config("attention: expected (B, C, L) input"));
        }
        let (b, c, l) = (shape[0], shape[1], shape[2]);
        for (name, w) in [("wq", wq), ("wk", wk), ("wv", wv)] {
            if self.value(w).shape() != [c, c] {
                return Err(Error::config(format!(
                    "attention: {name} must be ({c}, {c})"
                )));
            }
        }
        let x = ti.data();
        let (q_w, k_w, v_w) = (
            self.value(wq).data().to_vec(),
            self.value(wk).data().to_vec(),
            self.value(wv).data().to_vec(),
        );
        let inv_sqrt = 1.0 / (c as Real).sqrt();
        let per_sample: Vec<(Vec<Real>, AttnCache)> = par::map_indexed(b, |s| {
            let xt = kernels::transpose(&x[s * c * l..(s + 1) * c * l], c, l); // (L, C)
            let q = kernels::matmul(&xt, &q_w, l, c, c);
            let k = kernels::matmul(&xt, &k_w, l, c, c);
            let v = kernels::matmul(&xt, &v_w, l, c, c);
            let mut scores = kernels::matmul_nt(&q, &k, l, c, l);
            for sc in scores.iter_mut() {
                *sc *= inv_sqrt;
            }
            let attn = kernels::softmax_rows(&scores, l, l);
            let out_t = kernels::matmul(&attn, &v, l, l, c); // (L, C)
            let out = kernels::transpose(&out_t, l, c); // (C, L)
            (out, AttnCache { q, k, v, attn })
        });
        let mut data = Vec::with_capacity(b * c * l);
        let mut cache = Vec::with_capacity(b);
        for (out, cc) in per_sample {
            data.extend_from_slice(&out);
            cache.push(cc);
        }
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::Attention { input, wq, wk, wv, cache }, "attention")
    }

    /// Normalize each row of `(B, d)` to unit Euclidean norm. Zero rows
    /// stay zero.
    pub fn l2_normalize_rows(&mut self, input: NodeId) -> Result<NodeId> {
        let ti = self.value(input);
        let shape = ti.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::contract("l2_normalize_rows: expected (B, d)"));
        }
        let (b, d) = (shape[0], shape[1]);
        let x = ti.data();
        let mut data = vec![0.0; b * d];
        let mut norms = vec![0.0; b];
        for r in 0..b {
            let row = &x[r * d..(r + 1) * d];
            let n = kernels::dot(row, row).sqrt();
            norms[r] = n;
            if n > 1e-12 {
                for (o, &v) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *o = v / n;
                }
            }
        }
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::L2NormRows { input, norms }, "l2_normalize_rows")
    }

    /// Row-wise stable softmax on `(B, K)`.
    pub fn softmax_rows(&mut self, input: NodeId) -> Result<NodeId> {
        let ti = self.value(input);
        let shape = ti.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::contract("softmax_rows: expected (B, K)"));
        }
        let data = kernels::softmax_rows(ti.data(), shape[0], shape[1]);
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::SoftmaxRows(input), "softmax_rows")
    }

    pub fn mean_all(&mut self, input: NodeId) -> Result<NodeId> {
        let ti = self.value(input);
        let n = ti.len() as Real;
        let v = ti.data().iter().sum::<Real>() / n;
        self.push(Tensor::scalar(v), Op::MeanAll(input), "mean_all")
    }

    pub fn sum_all(&mut self, input: NodeId) -> Result<NodeId> {
        let ti = self.value(input);
        let v = ti.data().iter().sum::<Real>();
        self.push(Tensor::scalar(v), Op::SumAll(input), "sum_all")
    }

    /// Future-prediction contrastive loss over a batch.
    ///
    /// `pred` row `n` is the predicted embedding for position `n + 1`;
    /// `target` row `n + 1` is the actual one. Anchors run over
    /// `n = 0..B-2` (the last element has no successor) and the result
    /// is the mean of the per-anchor negative log-likelihoods. See
    /// [`NceMode`] for the two denominator forms.
    pub fn predictive_nce(
        &mut self,
        pred: NodeId,
        target: NodeId,
        tau: Real,
        mode: NceMode,
    ) -> Result<NodeId> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() || tp.shape().len() != 2 {
            return Err(Error::contract("predictive_nce: pred/target must both be (B, d)"));
        }
        let b = tp.shape()[0];
        if b < 2 {
            return Err(Error::contract("predictive_nce: batch size must be >= 2"));
        }
        if tau <= 0.0 {
            return Err(Error::contract("predictive_nce: tau must be > 0"));
        }
        let mut total = 0.0;
        for n in 0..b - 1 {
            let (pos, terms) = nce_terms(tp.data(), tt.data(), tp.shape()[1], n, tau, mode);
            total += logsumexp(&terms) - pos;
        }
        let loss = total / (b - 1) as Real;
        self.push(
            Tensor::scalar(loss),
            Op::PredictiveNce { pred, target, tau, mode },
            "predictive_nce",
        )
    }

    /// NT-Xent instance-discrimination loss over paired views: rows
    /// `2i` and `2i + 1` are two views of instance `i`; the denominator
    /// for each row runs over every other row.
    pub fn ntxent(&mut self, views: NodeId, tau: Real) -> Result<NodeId> {
        let tv = self.value(views);
        if tv.shape().len() != 2 || tv.shape()[0] < 4 || tv.shape()[0] % 2 != 0 {
            return Err(Error::contract("ntxent: expected (2B, d) with B >= 2"));
        }
        if tau <= 0.0 {
            return Err(Error::contract("ntxent: tau must be > 0"));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let x = tv.data();
        let mut total = 0.0;
        for i in 0..v {
            let partner = i ^ 1;
            let mut terms = Vec::with_capacity(v - 1);
            let mut pos = 0.0;
            for j in 0..v {
                if j == i {
                    continue;
                }
                let s = kernels::dot(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]) / tau;
                if j == partner {
                    pos = s;
                }
                terms.push(s);
            }
            total += logsumexp(&terms) - pos;
        }
        let loss = total / v as Real;
        self.push(Tensor::scalar(loss), Op::NtXent { views, tau }, "ntxent")
    }

    /// Mean cross-entropy of `(B, K)` logits against integer targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 {
            return Err(Error::contract("cross_entropy: expected (B, K) logits"));
        }
        let (b, k) = (tl.shape()[0], tl.shape()[1]);
        if targets.len() != b {
            return Err(Error::contract("cross_entropy: target count != batch size"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::data(format!("cross_entropy: label {bad} out of range 0..{k}")));
        }
        let x = tl.data();
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for r in 0..b {
            let row = &x[r * k..(r + 1) * k];
            kernels::softmax_into(row, &mut probs[r * k..(r + 1) * k]);
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<Real>().ln();
            total -= row[targets[r]] - lse;
        }
        let loss = total / b as Real;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        let mut touched = vec![false; self.nodes.len()];
        grads[loss.0].data_mut()[0] = 1.0;
        touched[loss.0] = true;

        for i in (0..self.nodes.len()).rev() {
            if !touched[i] {
                continue;
            }
            let grad = std::mem::replace(&mut grads[i], Tensor::zeros(vec![0]));
            self.backward_node(i, grad.data(), &mut grads, &mut touched);
            grads[i] = grad;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Tensor], touched: &mut [bool], id: NodeId, delta: &[Real]) {
        touched[id.0] = true;
        for (g, d) in grads[id.0].data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn backward_node(&self, i: usize, grad: &[Real], grads: &mut [Tensor], touched: &mut [bool]) {
        let acc = Self::accumulate;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, touched, *a, grad);
                acc(grads, touched, *b, grad);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<Real> = grad.iter().zip(vb).map(|(g, y)| g * y).collect();
                let db: Vec<Real> = grad.iter().zip(va).map(|(g, x)| g * x).collect();
                acc(grads, touched, *a, &da);
                acc(grads, touched, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<Real> = grad.iter().map(|g| g * c).collect();
                acc(grads, touched, *a, &da);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da: Vec<Real> = grad
                    .iter()
                    .zip(x)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(grads, touched, *a, &da);
            }
            Op::Linear { input, weight, bias } => {
                let (ti, tw) = (self.value(*input), self.value(*weight));
                let (b, f_in) = (ti.shape()[0], ti.shape()[1]);
                let f_out = tw.shape()[1];
                let d_in = kernels::matmul_nt(grad, tw.data(), b, f_out, f_in);
                let d_w = kernels::matmul_tn(ti.data(), grad, b, f_in, f_out);
                let mut d_b = vec![0.0; f_out];
                for r in 0..b {
                    for (db, g) in d_b.iter_mut().zip(&grad[r * f_out..(r + 1) * f_out]) {
                        *db += g;
                    }
                }
                acc(grads, touched, *input, &d_in);
                acc(grads, touched, *weight, &d_w);
                acc(grads, touched, *bias, &d_b);
            }
            Op::Conv1d { input, weight, bias, pad } => {
                let (ti, tw) = (self.value(*input), self.value(*weight));
                let (batch, c_in, l) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
                let (c_out, kernel) = (tw.shape()[0], tw.shape()[2]);
                let l_out = kernels::conv_out_len(l, kernel, *pad);
                let (x, w, pad) = (ti.data(), tw.data(), *pad);
                let per_sample = par::map_indexed(batch, |s| {
                    kernels::conv1d_sample_backward(
                        &x[s * c_in * l..(s + 1) * c_in * l],
                        w,
                        &grad[s * c_out * l_out..(s + 1) * c_out * l_out],
                        c_in,
                        l,
                        c_out,
                        kernel,
                        pad,
                    )
                });
                let mut d_in = Vec::with_capacity(batch * c_in * l);
                let mut d_w = vec![0.0; c_out * c_in * kernel];
                let mut d_b = vec![0.0; c_out];
                for (di, dw, db) in per_sample {
                    d_in.extend_from_slice(&di);
                    for (a, v) in d_w.iter_mut().zip(&dw) {
                        *a += v;
                    }
                    for (a, v) in d_b.iter_mut().zip(&db) {
                        *a += v;
                    }
                }
                acc(grads, touched, *input, &d_in);
                acc(grads, touched, *weight, &d_w);
                acc(grads, touched, *bias, &d_b);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                eps,
                mean,
                var,
                train,
            } => {
                let ti = self.value(*input);
                let (b, c, l) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
                let x = ti.data();
                let g = self.value(*gamma).data();
                let n = (b * l) as Real;
                let mut d_in = vec![0.0; x.len()];
                let mut d_gamma = vec![0.0; c];
                let mut d_beta = vec![0.0; c];
                for ch in 0..c {
                    let inv = 1.0 / (var[ch] + eps).sqrt();
                    // channel-wise sums over all (b, l) positions
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ch) * l;
                        for t in 0..l {
                            let dy = grad[base + t];
                            let xhat = (x[base + t] - mean[ch]) * inv;
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                    }
                    d_gamma[ch] = sum_dy_xhat;
                    d_beta[ch] = sum_dy;
                    for bi in 0..b {
                        let base = (bi * c + ch) * l;
                        for t in 0..l {
                            let dy = grad[base + t];
                            if *train {
                                let xhat = (x[base + t] - mean[ch]) * inv;
                                d_in[base + t] = g[ch] * inv / n
                                    * (n * dy - sum_dy - xhat * sum_dy_xhat);
                            } else {
                                d_in[base + t] = g[ch] * inv * dy;
                            }
                        }
                    }
                }
                acc(grads, touched, *input, &d_in);
                acc(grads, touched, *gamma, &d_gamma);
                acc(grads, touched, *beta, &d_beta);
            }
            Op::MaxPool1d { input, argmax } => {
                let mut d_in = vec![0.0; self.value(*input).len()];
                for (g, &src) in grad.iter().zip(argmax) {
                    d_in[src] += g;
                }
                acc(grads, touched, *input, &d_in);
            }
            Op::Flatten(input) => {
                acc(grads, touched, *input, grad);
            }
            Op::Attention { input, wq, wk, wv, cache } => {
                let ti = self.value(*input);
                let (b, c, l) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
                let x = ti.data();
                let (q_w, k_w, v_w) = (
                    self.value(*wq).data(),
                    self.value(*wk).data(),
                    self.value(*wv).data(),
                );
                let inv_sqrt = 1.0 / (c as Real).sqrt();
                let per_sample = par::map_indexed(b, |s| {
                    let cc = &cache[s];
                    let xt = kernels::transpose(&x[s * c * l..(s + 1) * c * l], c, l);
                    let d_out_t =
                        kernels::transpose(&grad[s * c * l..(s + 1) * c * l], c, l); // (L, C)
                    let d_attn = kernels::matmul_nt(&d_out_t, &cc.v, l, c, l); // (L, L)
                    let d_v = kernels::matmul_tn(&cc.attn, &d_out_t, l, l, c); // (L, C)
                    let mut d_scores = kernels::softmax_rows_backward(&cc.attn, &d_attn, l, l);
                    for v in d_scores.iter_mut() {
                        *v *= inv_sqrt;
                    }
                    let d_q = kernels::matmul(&d_scores, &cc.k, l, l, c);
                    let d_k = kernels::matmul_tn(&d_scores, &cc.q, l, l, c);
                    // back through the three projections
                    let mut d_xt = kernels::matmul_nt(&d_q, q_w, l, c, c);
                    for (a, v) in d_xt.iter_mut().zip(kernels::matmul_nt(&d_k, k_w, l, c, c)) {
                        *a += v;
                    }
                    for (a, v) in d_xt.iter_mut().zip(kernels::matmul_nt(&d_v, v_w, l, c, c)) {
                        *a += v;
                    }
                    let d_x = kernels::transpose(&d_xt, l, c);
                    let d_wq = kernels::matmul_tn(&xt, &d_q, l, c, c);
                    let d_wk = kernels::matmul_tn(&xt, &d_k, l, c, c);
                    let d_wv = kernels::matmul_tn(&xt, &d_v, l, c, c);
                    (d_x, d_wq, d_wk, d_wv)
                });
                let mut d_in = Vec::with_capacity(b * c * l);
                let mut d_wq_sum = vec![0.0; c * c];
                let mut d_wk_sum = vec![0.0; c * c];
                let mut d_wv_sum = vec![0.0; c * c];
                for (dx, dwq, dwk, dwv) in per_sample {
                    d_in.extend_from_slice(&dx);
                    for (a, v) in d_wq_sum.iter_mut().zip(&dwq) {
                        *a += v;
                    }
                    for (a, v) in d_wk_sum.iter_mut().zip(&dwk) {
                        *a += v;
                    }
                    for (a, v) in d_wv_sum.iter_mut().zip(&dwv) {
                        *a += v;
                    }
                }
                acc(grads, touched, *input, &d_in);
                acc(grads, touched, *wq, &d_wq_sum);
                acc(grads, touched, *wk, &d_wk_sum);
                acc(grads, touched, *wv, &d_wv_sum);
            }
            Op::L2NormRows { input, norms } => {
                let ti = self.value(*input);
                let (b, d) = (ti.shape()[0], ti.shape()[1]);
                let x = ti.data();
                let mut d_in = vec![0.0; b * d];
                for r in 0..b {
                    let n = norms[r];
                    if n <= 1e-12 {
                        continue;
                    }
                    let row = &x[r * d..(r + 1) * d];
                    let grow = &grad[r * d..(r + 1) * d];
                    let zg = kernels::dot(row, grow);
                    let n3 = n * n * n;
                    for ((o, &v), &g) in d_in[r * d..(r + 1) * d].iter_mut().zip(row).zip(grow) {
                        *o = g / n - v * zg / n3;
                    }
                }
                acc(grads, touched, *input, &d_in);
            }
            Op::SoftmaxRows(input) => {
                let out = self.value(NodeId(i)).data();
                let shape = self.value(*input).shape();
                let d_in = kernels::softmax_rows_backward(out, grad, shape[0], shape[1]);
                acc(grads, touched, *input, &d_in);
            }
            Op::MeanAll(input) => {
                let n = self.value(*input).len();
                let g = grad[0] / n as Real;
                let d_in = vec![g; n];
                acc(grads, touched, *input, &d_in);
            }
            Op::SumAll(input) => {
                let n = self.value(*input).len();
                let d_in = vec![grad[0]; n];
                acc(grads, touched, *input, &d_in);
            }
            Op::PredictiveNce { pred, target, tau, mode } => {
                let (tp, tt) = (self.value(*pred), self.value(*target));
                let (b, d) = (tp.shape()[0], tp.shape()[1]);
                let (p, z) = (tp.data(), tt.data());
                let g = grad[0] / (b - 1) as Real;
                let mut d_p = vec![0.0; b * d];
                let mut d_z = vec![0.0; b * d];
                for n in 0..b - 1 {
                    let (_, terms) = nce_terms(p, z, d, n, *tau, *mode);
                    let lse = logsumexp(&terms);
                    let weights: Vec<Real> = terms.iter().map(|t| (t - lse).exp()).collect();
                    // numerator: -pos contributes coefficient -1 on the
                    // (pred[n], target[n+1]) pair
                    axpy(&mut d_p[n * d..(n + 1) * d], -g / tau, &z[(n + 1) * d..(n + 2) * d]);
                    axpy(&mut d_z[(n + 1) * d..(n + 2) * d], -g / tau, &p[n * d..(n + 1) * d]);
                    match mode {
                        NceMode::InfoNce => {
                            // term 0 is the positive, then predictions m != n
                            let w0 = weights[0] * g / tau;
                            axpy(&mut d_p[n * d..(n + 1) * d], w0, &z[(n + 1) * d..(n + 2) * d]);
                            axpy(&mut d_z[(n + 1) * d..(n + 2) * d], w0, &p[n * d..(n + 1) * d]);
                            let mut wi = 1;
                            for m in 0..b {
                                if m == n {
                                    continue;
                                }
                                let w = weights[wi] * g / tau;
                                wi += 1;
                                axpy(&mut d_p[n * d..(n + 1) * d], w, &p[m * d..(m + 1) * d]);
                                axpy(&mut d_p[m * d..(m + 1) * d], w, &p[n * d..(n + 1) * d]);
                            }
                        }
                        NceMode::PaperLiteral => {
                            for (m, &wt) in weights.iter().enumerate() {
                                let w = wt * g / tau;
                                axpy(&mut d_p[n * d..(n + 1) * d], w, &p[m * d..(m + 1) * d]);
                                axpy(&mut d_p[m * d..(m + 1) * d], w, &p[n * d..(n + 1) * d]);
                            }
                        }
                    }
                }
                acc(grads, touched, *pred, &d_p);
                acc(grads, touched, *target, &d_z);
            }
            Op::NtXent { views, tau } => {
                let tv = self.value(*views);
                let (v, d) = (tv.shape()[0], tv.shape()[1]);
                let x = tv.data();
                let g = grad[0] / v as Real;
                let mut d_x = vec![0.0; v * d];
                for i2 in 0..v {
                    let partner = i2 ^ 1;
                    let mut terms = Vec::with_capacity(v - 1);
                    let mut others = Vec::with_capacity(v - 1);
                    for j in 0..v {
                        if j == i2 {
                            continue;
                        }
                        terms.push(
                            kernels::dot(&x[i2 * d..(i2 + 1) * d], &x[j * d..(j + 1) * d]) / tau,
                        );
                        others.push(j);
                    }
                    let lse = logsumexp(&terms);
                    for (idx, &j) in others.iter().enumerate() {
                        let mut coeff = (terms[idx] - lse).exp();
                        if j == partner {
                            coeff -= 1.0;
                        }
                        let w = coeff * g / tau;
                        axpy(&mut d_x[i2 * d..(i2 + 1) * d], w, &x[j * d..(j + 1) * d]);
                        axpy(&mut d_x[j * d..(j + 1) * d], w, &x[i2 * d..(i2 + 1) * d]);
                    }
                }
                acc(grads, touched, *views, &d_x);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let tl = self.value(*logits);
                let (b, k) = (tl.shape()[0], tl.shape()[1]);
                let g = grad[0] / b as Real;
                let mut d_l = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d_l[r * k + t] -= 1.0;
                }
                for v in d_l.iter_mut() {
                    *v *= g;
                }
                acc(grads, touched, *logits, &d_l);
            }
        }
    }
}

/// Positive logit and denominator terms for anchor `n` of the
/// predictive contrastive loss.
fn nce_terms(
    p: &[Real],
    z: &[Real],
    d: usize,
    n: usize,
    tau: Real,
    mode: NceMode,
) -> (Real, Vec<Real>) {
    let b = p.len() / d;
    let pn = &p[n * d..(n + 1) * d];
    let pos = kernels::dot(pn, &z[(n + 1) * d..(n + 2) * d]) / tau;
    let mut terms = Vec::with_capacity(b);
    match mode {
        NceMode::InfoNce => {
            terms.push(pos);
            for m in 0..b {
                if m == n {
                    continue;
                }
                terms.push(kernels::dot(pn, &p[m * d..(m + 1) * d]) / tau);
            }
        }
        NceMode::PaperLiteral => {
            for m in 0..b {
                terms.push(kernels::dot(pn, &p[m * d..(m + 1) * d]) / tau);
            }
        }
    }
    (pos, terms)
}

fn logsumexp(terms: &[Real]) -> Real {
    let max = terms.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<Real>().ln()
}

fn axpy(out: &mut [Real], a: Real, x: &[Real]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<Real>) -> NodeId {
        tape.leaf(Tensor::new(shape, data).unwrap()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3], vec![1.0, 2.0, 3.0]);
        let loss = tape.sum_all(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        // loss = x * x at x = 3 -> d/dx = 6
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 1], vec![3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[6.0]);
    }

    #[test]
    fn relu_example() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let unused = leaf(&mut tape, vec![1, 2], vec![5.0, 5.0]);
        let loss = tape.sum_all(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_violation() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 4], vec![0.0; 4]);
        let s = tape.softmax_rows(x).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_predictor() {
        // zero logits with K = 4 -> loss = ln 4
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 4], vec![0.0; 8]);
        let loss = tape.cross_entropy(x, &[1, 3]).unwrap();
        let expected = (4.0 as Real).ln();
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3], vec![0.0; 3]);
        assert!(tape.cross_entropy(x, &[3]).is_err());
    }

    #[test]
    fn predictive_nce_identical_normalized_rows() {
        // 32 identical unit-norm embeddings with an identity predictor:
        // every similarity is 1, the softmax is uniform over 32 terms.
        let b = 32;
        let d = 4;
        let mut row = vec![0.5; d]; // norm 1
        row[0] = 0.5;
        let data: Vec<Real> = (0..b).flat_map(|_| row.clone()).collect();
        let mut tape = Tape::new();
        let z = leaf(&mut tape, vec![b, d], data.clone());
        let p = leaf(&mut tape, vec![b, d], data);
        let loss = tape.predictive_nce(p, z, 0.5, NceMode::InfoNce).unwrap();
        let expected = (b as Real).ln();
        assert!(
            (tape.value(loss).item().unwrap() - expected).abs() < 1e-9,
            "loss {} vs ln {}",
            tape.value(loss).item().unwrap(),
            b
        );
    }

    #[test]
    fn predictive_nce_dominant_positive_goes_to_zero() {
        // B = 2: one anchor. Make the positive similarity large and the
        // negatives strongly negative; the loss should approach 0+.
        let d = 3;
        let z = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let p = vec![0.0, 0.0, 1.0, -1.0, 0.0, 0.0];
        let mut tape = Tape::new();
        let zl = leaf(&mut tape, vec![2, d], z);
        let pl = leaf(&mut tape, vec![2, d], p);
        let loss = tape.predictive_nce(pl, zl, 0.05, NceMode::InfoNce).unwrap();
        let v = tape.value(loss).item().unwrap();
        assert!(v > 0.0 && v < 1e-6, "loss = {v}");
    }

    #[test]
    fn finiteness_is_enforced() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![1e308, 1e308]);
        // 1e308 + 1e308 overflows to +inf
        assert!(tape.add(x, x).is_err());
    }
}

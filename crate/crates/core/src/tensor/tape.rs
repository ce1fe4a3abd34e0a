use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::kernels::{col2im_add, gemm, im2col, log_softmax_rows, softmax_rows, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchNormMode {
    Train,
    Eval,
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BatchNormMode,
    },
    Relu {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Flatten {
        input: Var,
    },
    /// Mean negative log-likelihood of the labels.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        posterior: Vec<f64>,
    },
    /// Sum over rows of `log p(target | x)`.
    LogProb {
        logits: Var,
        targets: Vec<usize>,
        posterior: Vec<f64>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations. Parameters are borrowed for the
/// lifetime `'p`, so recording a forward pass never copies weights.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

pub struct LossOutput {
    pub var: Var,
    pub loss: f64,
    pub posterior: Tensor,
}

/// Reverse-mode result: the gradient of the output with respect to every
/// recorded value that depends on a differentiable leaf.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Indices of the non-leaf operations replayed, in replay order.
    pub fn visited_ops(&self) -> &[usize] {
        &self.visited
    }
}

/// Per-sample reduction applied at every parameter slot instead of summing
/// the batch gradient.
pub enum PerSample<'a> {
    /// `||d log p_n / d w||^2` per sample and parameter tensor.
    SqNorm,
    /// `<d log p_n / d w, direction>` per sample; parameters missing from the
    /// map have a zero direction.
    Dot(&'a HashMap<Var, Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct PerSampleResult {
    pub samples: usize,
    pub by_param: BTreeMap<Var, Vec<f64>>,
}

impl PerSampleResult {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.by_param.get(&var).map(|v| v.as_slice())
    }

    /// Sum over parameters, per sample.
    pub fn totals(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.samples];
        for v in self.by_param.values() {
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        out
    }
}

struct PerSampleAcc<'a> {
    reduce: PerSample<'a>,
    samples: usize,
    out: BTreeMap<Var, Vec<f64>>,
}

impl PerSampleAcc<'_> {
    fn slot(&mut self, var: Var) -> Result<&mut Vec<f64>> {
        if self.out.contains_key(&var) {
            return Err(Error::invalid(format!(
                "parameter {var:?} is used more than once; per-sample reduction needs single use"
            )));
        }
        Ok(self
            .out
            .entry(var)
            .or_insert_with(|| vec![0.0; self.samples]))
    }

    /// Reduces explicit per-sample gradients laid out as `[samples, len]`.
    fn record_dense(&mut self, var: Var, per_sample: &[f64]) -> Result<()> {
        let samples = self.samples;
        let len = per_sample.len() / samples;
        let values: Vec<f64> = match &self.reduce {
            PerSample::SqNorm => per_sample
                .chunks(len)
                .map(|g| g.iter().map(|v| v * v).sum())
                .collect(),
            PerSample::Dot(dirs) => match dirs.get(&var) {
                Some(d) => per_sample
                    .chunks(len)
                    .map(|g| g.iter().zip(d).map(|(a, b)| a * b).sum())
                    .collect(),
                None => vec![0.0; samples],
            },
        };
        *self.slot(var)? = values;
        Ok(())
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], var: Var, delta: &[f64]) {
    match &mut grads[var.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

fn buf(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'p>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a borrowed trainable tensor.
    pub fn param(&mut self, tensor: &'p Tensor) -> Var {
        self.push(Value::Borrowed(tensor), Op::Leaf, true)
    }

    /// Records an owned differentiable leaf.
    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.push(Value::Owned(tensor), Op::Leaf, true)
    }

    /// Records an owned leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(Value::Owned(tensor), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.nodes[var.0].value.tensor()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn is_leaf(&self, var: Var) -> bool {
        matches!(self.nodes[var.0].op, Op::Leaf)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input [N,C,H,W] vs weight [K,C,kh,kw])",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (k, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        if let Some(b) = bias {
            if self.value(b).shape() != [k] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![k],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let (out_h, out_w) = match (
            super::conv_output_size(h, kh, stride, pad),
            super::conv_output_size(wd, kw, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidShape {
                    shape: x.shape().to_vec(),
                    reason: format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit"),
                })
            }
        };
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        };
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * p];
        let mut out = vec![0.0; n * k * p];
        let xin = x.data();
        let wdat = w.data();
        let bdat = bias.map(|b| self.value(b).data());
        for s in 0..n {
            im2col(&xin[s * c * h * wd..(s + 1) * c * h * wd], &geom, &mut cols);
            let dst = &mut out[s * k * p..(s + 1) * k * p];
            gemm(k, rows, p, wdat, false, &cols, false, 0.0, dst);
            if let Some(b) = bdat {
                for (kk, row) in dst.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += b[kk]);
                }
            }
        }
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        let t = Tensor::new(vec![n, k, out_h, out_w], out)?;
        Ok(self.push(
            Value::Owned(t),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            needs,
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "linear (input [N,D] vs weight [M,D])",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (n, d, m) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        if let Some(b) = bias {
            if self.value(b).shape() != [m] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![m],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let mut out = vec![0.0; n * m];
        gemm(n, d, m, x.data(), false, w.data(), true, 0.0, &mut out);
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
            }
        }
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(
            Value::Owned(t),
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// Per-channel normalization over the batch (and spatial) axes.
    /// In train mode the running statistics are updated in place.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let x = self.value(input);
        if x.rank() < 2 {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "batch norm needs [N,C,...]".into(),
            });
        }
        let n = x.shape()[0];
        let c = x.shape()[1];
        let spatial: usize = x.shape()[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: if name == "gamma" {
                        "batch norm gamma"
                    } else {
                        "batch norm beta"
                    },
                    lhs: vec![c],
                    rhs: self.value(v).shape().to_vec(),
                });
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch norm running stats",
                lhs: vec![c],
                rhs: vec![stats.mean.len()],
            });
        }
        if mode == BatchNormMode::Train && n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let xd = x.data();
        let idx = |s: usize, ch: usize, j: usize| (s * c + ch) * spatial + j;
        let count = (n * spatial) as f64;
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; xd.len()];
        for ch in 0..c {
            let (mean, var) = match mode {
                BatchNormMode::Train => {
                    let mut sum = 0.0;
                    for s in 0..n {
                        for j in 0..spatial {
                            sum += xd[idx(s, ch, j)];
                        }
                    }
                    let mean = sum / count;
                    let mut sq = 0.0;
                    for s in 0..n {
                        for j in 0..spatial {
                            let d = xd[idx(s, ch, j)] - mean;
                            sq += d * d;
                        }
                    }
                    let var = sq / count;
                    let unbiased = sq / (count - 1.0);
                    stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean;
                    stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * unbiased;
                    (mean, var)
                }
                BatchNormMode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            for s in 0..n {
                for j in 0..spatial {
                    let i = idx(s, ch, j);
                    xhat[i] = (xd[i] - mean) * is;
                }
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for s in 0..n {
            for ch in 0..c {
                for j in 0..spatial {
                    let i = idx(s, ch, j);
                    out[i] = g[ch] * out[i] + b[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            Value::Owned(t),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|v| v.max(0.0)).collect();
        let needs = self.needs(input);
        let t = Tensor::new(shape, data).expect("relu preserves shape");
        self.push(Value::Owned(t), Op::Relu { input }, needs)
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "global average pooling needs [N,C,H,W]".into(),
            });
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let area = x.shape()[2] * x.shape()[3];
        let data = x
            .data()
            .chunks(area)
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        let needs = self.needs(input);
        let t = Tensor::new(vec![n, c], data)?;
        Ok(self.push(Value::Owned(t), Op::GlobalAvgPool { input }, needs))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let a = self.value(lhs);
        let b = self.value(rhs);
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let needs = self.needs(lhs) || self.needs(rhs);
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(Value::Owned(t), Op::Add { lhs, rhs }, needs))
    }

    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = x.shape()[0];
        let rest = x.numel() / n;
        let t = Tensor::new(vec![n, rest], x.data().to_vec())?;
        let needs = self.needs(input);
        Ok(self.push(Value::Owned(t), Op::Flatten { input }, needs))
    }

    fn check_labels(&self, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
        let z = self.value(logits);
        if z.rank() != 2 || z.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax (logits [N,C] vs labels [N])",
                lhs: z.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let classes = z.shape()[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok((labels.len(), classes))
    }

    /// Mean cross-entropy of `labels` under the softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<LossOutput> {
        let (n, classes) = self.check_labels(logits, labels)?;
        let z = self.value(logits).data();
        let logp = log_softmax_rows(z, classes);
        let posterior = softmax_rows(z, classes);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| logp[i * classes + l])
            .sum::<f64>()
            / n as f64;
        let needs = self.needs(logits);
        let post = Tensor::new(vec![n, classes], posterior.clone())?;
        let var = self.push(
            Value::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                posterior,
            },
            needs,
        );
        Ok(LossOutput {
            var,
            loss,
            posterior: post,
        })
    }

    /// `sum_n log p(targets[n] | x_n)`; the targets need not be dataset labels.
    pub fn log_prob(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (_, classes) = self.check_labels(logits, targets)?;
        let z = self.value(logits).data();
        let logp = log_softmax_rows(z, classes);
        let posterior = softmax_rows(z, classes);
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| logp[i * classes + t])
            .sum();
        let needs = self.needs(logits);
        Ok(self.push(
            Value::Owned(Tensor::scalar(total)),
            Op::LogProb {
                logits,
                targets: targets.to_vec(),
                posterior,
            },
            needs,
        ))
    }

    /// Gradient of a scalar output with respect to everything upstream.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check_output(output)?;
        if self.value(output).numel() != 1 {
            return Err(Error::InvalidShape {
                shape: self.value(output).shape().to_vec(),
                reason: "backward needs a scalar output".into(),
            });
        }
        self.run_backward(output, vec![1.0], None)
    }

    /// Vector-Jacobian product seeded with `seed = d(objective)/d(output)`.
    pub fn backward_with_seed(&self, output: Var, seed: &[f64]) -> Result<Gradients> {
        self.check_output(output)?;
        if seed.len() != self.value(output).numel() {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                lhs: self.value(output).shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        self.run_backward(output, seed.to_vec(), None)
    }

    /// Per-sample parameter gradient reductions for a loss that is a sum or
    /// mean over independent samples. Requires every batch norm on the path to
    /// run in eval mode, so samples do not interact.
    pub fn backward_per_sample(
        &self,
        output: Var,
        reduce: PerSample<'_>,
    ) -> Result<PerSampleResult> {
        self.check_output(output)?;
        let samples = match &self.nodes[output.0].op {
            Op::CrossEntropy { labels, .. } => labels.len(),
            Op::LogProb { targets, .. } => targets.len(),
            _ => {
                return Err(Error::invalid(
                    "per-sample backward needs a cross-entropy or log-prob output",
                ))
            }
        };
        let mut acc = PerSampleAcc {
            reduce,
            samples,
            out: BTreeMap::new(),
        };
        self.run_backward(output, vec![1.0], Some(&mut acc))?;
        Ok(PerSampleResult {
            samples,
            by_param: acc.out,
        })
    }

    fn check_output(&self, output: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::NoForwardRecord("tape is empty".into()));
        }
        let node = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::NoForwardRecord(format!("{output:?} is not on this tape")))?;
        if matches!(node.op, Op::Leaf) {
            return Err(Error::NoForwardRecord(format!(
                "{output:?} is a leaf, no operation recorded"
            )));
        }
        Ok(())
    }

    /// Whether `var` should receive a per-sample reduction instead of a
    /// summed gradient.
    fn per_sample_slot(&self, acc: &Option<&mut PerSampleAcc<'_>>, var: Var) -> bool {
        acc.is_some() && self.is_leaf(var)
    }

    fn run_backward(
        &self,
        output: Var,
        seed: Vec<f64>,
        mut acc: Option<&mut PerSampleAcc<'_>>,
    ) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut visited = Vec::new();
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => self.conv_backward(&g, *input, *weight, *bias, geom, &mut grads, &mut acc)?,
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => self.linear_backward(&g, *input, *weight, *bias, &mut grads, &mut acc)?,
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    mode,
                } => {
                    if acc.is_some() && *mode == BatchNormMode::Train {
                        return Err(Error::invalid(
                            "per-sample gradients are undefined through train-mode batch norm",
                        ));
                    }
                    self.bn_backward(
                        &g, *input, *gamma, *beta, xhat, inv_std, *mode, &mut grads, &mut acc,
                    )?
                }
                Op::Relu { input } => {
                    if self.needs(*input) {
                        let x = self.value(*input).data();
                        let d: Vec<f64> = g
                            .iter()
                            .zip(x)
                            .map(|(gg, &xx)| if xx > 0.0 { *gg } else { 0.0 })
                            .collect();
                        add_into(&mut grads, *input, &d);
                    }
                }
                Op::GlobalAvgPool { input } => {
                    if self.needs(*input) {
                        let x = self.value(*input);
                        let area = x.shape()[2] * x.shape()[3];
                        let mut d = vec![0.0; x.numel()];
                        for (plane, gg) in d.chunks_mut(area).zip(&g) {
                            plane.iter_mut().for_each(|v| *v = gg / area as f64);
                        }
                        add_into(&mut grads, *input, &d);
                    }
                }
                Op::Add { lhs, rhs } => {
                    for v in [*lhs, *rhs] {
                        if self.needs(v) {
                            add_into(&mut grads, v, &g);
                        }
                    }
                }
                Op::Flatten { input } => {
                    if self.needs(*input) {
                        add_into(&mut grads, *input, &g);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    posterior,
                } => {
                    let classes = posterior.len() / labels.len();
                    let scale = g[0] / labels.len() as f64;
                    let mut d: Vec<f64> = posterior.iter().map(|p| p * scale).collect();
                    for (n, &l) in labels.iter().enumerate() {
                        d[n * classes + l] -= scale;
                    }
                    add_into(&mut grads, *logits, &d);
                }
                Op::LogProb {
                    logits,
                    targets,
                    posterior,
                } => {
                    let classes = posterior.len() / targets.len();
                    let mut d: Vec<f64> = posterior.iter().map(|p| -p * g[0]).collect();
                    for (n, &t) in targets.iter().enumerate() {
                        d[n * classes + t] += g[0];
                    }
                    add_into(&mut grads, *logits, &d);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &[f64],
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        grads: &mut [Option<Vec<f64>>],
        acc: &mut Option<&mut PerSampleAcc<'_>>,
    ) -> Result<()> {
        let x = self.value(input);
        let w = self.value(weight);
        let n = x.shape()[0];
        let k = w.shape()[0];
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let img = geom.channels * geom.height * geom.width;
        let need_w = self.needs(weight);
        let need_b = bias.is_some_and(|b| self.needs(b));
        let need_x = self.needs(input);
        let per_w = need_w && self.per_sample_slot(acc, weight);
        let per_b = need_b && self.per_sample_slot(acc, bias.unwrap());

        let mut cols = vec![0.0; rows * p];
        let mut dcols = vec![0.0; rows * p];
        let mut per_sample_w = if per_w {
            vec![0.0; n * k * rows]
        } else {
            Vec::new()
        };
        let mut per_sample_b = if per_b { vec![0.0; n * k] } else { Vec::new() };
        let mut dx = if need_x {
            vec![0.0; x.numel()]
        } else {
            Vec::new()
        };
        let mut dw = if need_w && !per_w {
            vec![0.0; w.numel()]
        } else {
            Vec::new()
        };
        let mut db = if need_b && !per_b {
            vec![0.0; k]
        } else {
            Vec::new()
        };

        for s in 0..n {
            let gs = &g[s * k * p..(s + 1) * k * p];
            if need_w {
                im2col(&x.data()[s * img..(s + 1) * img], geom, &mut cols);
                if per_w {
                    let dst = &mut per_sample_w[s * k * rows..(s + 1) * k * rows];
                    gemm(k, p, rows, gs, false, &cols, true, 0.0, dst);
                } else {
                    gemm(k, p, rows, gs, false, &cols, true, 1.0, &mut dw);
                }
            }
            if need_b {
                for (kk, row) in gs.chunks(p).enumerate() {
                    let sum: f64 = row.iter().sum();
                    if per_b {
                        per_sample_b[s * k + kk] = sum;
                    } else {
                        db[kk] += sum;
                    }
                }
            }
            if need_x {
                gemm(rows, k, p, w.data(), true, gs, false, 0.0, &mut dcols);
                col2im_add(&dcols, geom, &mut dx[s * img..(s + 1) * img]);
            }
        }
        if need_w {
            if per_w {
                acc.as_mut().unwrap().record_dense(weight, &per_sample_w)?;
            } else {
                add_into(grads, weight, &dw);
            }
        }
        if let Some(b) = bias.filter(|_| need_b) {
            if per_b {
                acc.as_mut().unwrap().record_dense(b, &per_sample_b)?;
            } else {
                add_into(grads, b, &db);
            }
        }
        if need_x {
            add_into(grads, input, &dx);
        }
        Ok(())
    }

    fn linear_backward(
        &self,
        g: &[f64],
        input: Var,
        weight: Var,
        bias: Option<Var>,
        grads: &mut [Option<Vec<f64>>],
        acc: &mut Option<&mut PerSampleAcc<'_>>,
    ) -> Result<()> {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, d, m) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        if self.needs(weight) {
            if self.per_sample_slot(acc, weight) {
                let a = acc.as_mut().unwrap();
                // d/dW of sample n is the outer product delta_n x_n^T
                let values: Vec<f64> = match &a.reduce {
                    PerSample::SqNorm => (0..n)
                        .map(|s| {
                            let gn: f64 = g[s * m..(s + 1) * m].iter().map(|v| v * v).sum();
                            let xn: f64 = x.data()[s * d..(s + 1) * d].iter().map(|v| v * v).sum();
                            gn * xn
                        })
                        .collect(),
                    PerSample::Dot(dirs) => match dirs.get(&weight) {
                        Some(dir) => {
                            let mut proj = vec![0.0; n * m];
                            gemm(n, d, m, x.data(), false, dir, true, 0.0, &mut proj);
                            (0..n)
                                .map(|s| {
                                    g[s * m..(s + 1) * m]
                                        .iter()
                                        .zip(&proj[s * m..(s + 1) * m])
                                        .map(|(a, b)| a * b)
                                        .sum()
                                })
                                .collect()
                        }
                        None => vec![0.0; n],
                    },
                };
                *a.slot(weight)? = values;
            } else {
                let dw = buf(grads, weight, m * d);
                gemm(m, n, d, g, true, x.data(), false, 1.0, dw);
            }
        }
        if let Some(b) = bias.filter(|&b| self.needs(b)) {
            if self.per_sample_slot(acc, b) {
                acc.as_mut().unwrap().record_dense(b, g)?;
            } else {
                let db = buf(grads, b, m);
                for row in g.chunks(m) {
                    db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
            }
        }
        if self.needs(input) {
            let mut dx = vec![0.0; n * d];
            gemm(n, m, d, g, false, w.data(), false, 0.0, &mut dx);
            add_into(grads, input, &dx);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        g: &[f64],
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: &[f64],
        inv_std: &[f64],
        mode: BatchNormMode,
        grads: &mut [Option<Vec<f64>>],
        acc: &mut Option<&mut PerSampleAcc<'_>>,
    ) -> Result<()> {
        let x = self.value(input);
        let n = x.shape()[0];
        let c = x.shape()[1];
        let spatial: usize = x.shape()[2..].iter().product();
        let idx = |s: usize, ch: usize, j: usize| (s * c + ch) * spatial + j;
        let gam = self.value(gamma).data();

        // per-sample, per-channel sums of g*xhat and g
        let mut dgamma_ps = vec![0.0; n * c];
        let mut dbeta_ps = vec![0.0; n * c];
        for s in 0..n {
            for ch in 0..c {
                let (mut a, mut b) = (0.0, 0.0);
                for j in 0..spatial {
                    let i = idx(s, ch, j);
                    a += g[i] * xhat[i];
                    b += g[i];
                }
                dgamma_ps[s * c + ch] = a;
                dbeta_ps[s * c + ch] = b;
            }
        }
        for (param, per_sample) in [(gamma, &dgamma_ps), (beta, &dbeta_ps)] {
            if !self.needs(param) {
                continue;
            }
            if self.per_sample_slot(acc, param) {
                acc.as_mut().unwrap().record_dense(param, per_sample)?;
            } else {
                let mut total = vec![0.0; c];
                for row in per_sample.chunks(c) {
                    total.iter_mut().zip(row).for_each(|(t, v)| *t += v);
                }
                add_into(grads, param, &total);
            }
        }
        if self.needs(input) {
            let mut dx = vec![0.0; x.numel()];
            match mode {
                BatchNormMode::Eval => {
                    for s in 0..n {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            for j in 0..spatial {
                                let i = idx(s, ch, j);
                                dx[i] = g[i] * scale;
                            }
                        }
                    }
                }
                BatchNormMode::Train => {
                    let count = (n * spatial) as f64;
                    for ch in 0..c {
                        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                        for s in 0..n {
                            sum_g += dbeta_ps[s * c + ch];
                            sum_gx += dgamma_ps[s * c + ch];
                        }
                        let scale = gam[ch] * inv_std[ch] / count;
                        for s in 0..n {
                            for j in 0..spatial {
                                let i = idx(s, ch, j);
                                dx[i] = scale * (count * g[i] - sum_g - xhat[i] * sum_gx);
                            }
                        }
                    }
                }
            }
            add_into(grads, input, &dx);
        }
        Ok(())
    }

    /// Posterior recorded by a cross-entropy or log-prob node.
    pub fn posterior(&self, var: Var) -> Option<&[f64]> {
        match &self.nodes.get(var.0)?.op {
            Op::CrossEntropy { posterior, .. } | Op::LogProb { posterior, .. } => Some(posterior),
            _ => None,
        }
    }
}

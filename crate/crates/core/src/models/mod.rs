//! Architecture descriptions, their weight sets, and the forward pass.

mod builders;
pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{conv_output_size, BatchNormMode, Gradients, RunningStats, Tape, Tensor, Var};

pub use builders::{build_allcnn, build_fc, build_reslite, build_vardepth, scaled_width};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Convolution with "same" padding for odd kernels; `batch_norm` drops
    /// the bias.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        batch_norm: bool,
        relu: bool,
    },
    Linear {
        out_features: usize,
        batch_norm: bool,
        relu: bool,
    },
    Flatten,
    GlobalAvgPool,
    /// Two 3x3 conv + batch-norm stages with a skip connection, then ReLU.
    /// The skip is the identity unless channels or stride change, in which
    /// case it is a 1x1 convolution followed by batch norm.
    Residual {
        out_channels: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
    pub input_shape: [usize; 3],
    pub width_scale: f64,
}

impl ModelSpec {
    pub fn with_input_shape(mut self, input_shape: [usize; 3]) -> Result<Self> {
        self.input_shape = input_shape;
        self.output_shapes()?;
        Ok(self)
    }

    /// Per-sample output shape of every layer; fails on incompatible layers.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |reason: String| Error::InvalidShape {
                shape: shape.clone(),
                reason: format!("layer {i} ({layer:?}): {reason}"),
            };
            shape = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if shape.len() != 3 {
                        return Err(bad("convolution needs a [C,H,W] input".into()));
                    }
                    let pad = kernel / 2;
                    let h = conv_output_size(shape[1], kernel, stride, pad);
                    let w = conv_output_size(shape[2], kernel, stride, pad);
                    match (h, w) {
                        (Some(h), Some(w)) if h > 0 && w > 0 => vec![out_channels, h, w],
                        _ => return Err(bad("spatial size too small".into())),
                    }
                }
                LayerSpec::Residual {
                    out_channels,
                    stride,
                } => {
                    if shape.len() != 3 {
                        return Err(bad("residual block needs a [C,H,W] input".into()));
                    }
                    let h = conv_output_size(shape[1], 3, stride, 1);
                    let w = conv_output_size(shape[2], 3, stride, 1);
                    match (h, w) {
                        (Some(h), Some(w)) if h > 0 && w > 0 => vec![out_channels, h, w],
                        _ => return Err(bad("spatial size too small".into())),
                    }
                }
                LayerSpec::Linear { out_features, .. } => {
                    if shape.len() != 1 {
                        return Err(bad("linear layer needs a flat input".into()));
                    }
                    vec![out_features]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::GlobalAvgPool => {
                    if shape.len() != 3 {
                        return Err(bad("pooling needs a [C,H,W] input".into()));
                    }
                    vec![shape[0]]
                }
            };
            shapes.push(shape.clone());
        }
        if shape != [self.class_count] {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("final output must be [{}]", self.class_count),
            });
        }
        Ok(shapes)
    }

    /// Stable 64-bit digest of the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Widths of the conv/linear layers in order (residual blocks count
    /// their two convolutions).
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for l in &self.layers {
            match *l {
                LayerSpec::Conv { out_channels, .. } => out.push(out_channels),
                LayerSpec::Linear { out_features, .. } => out.push(out_features),
                LayerSpec::Residual { out_channels, .. } => {
                    out.extend([out_channels, out_channels])
                }
                _ => {}
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub group: usize,
    pub name: String,
    pub tensor: Tensor,
}

/// A conv or linear layer together with its bias and batch-norm affine
/// parameters; the unit of layer-wise Fisher reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub id: usize,
    pub label: String,
    pub kind: GroupKind,
    pub params: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Conv,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: Vec<Param>,
    pub running: Vec<RunningStats>,
    pub groups: Vec<LayerGroup>,
}

/// Result of recording a forward pass: the logits and the tape handle of
/// every parameter, indexed like [`ModelState::params`].
pub struct Forward {
    pub logits: Var,
    pub param_vars: Vec<Var>,
}

struct InitCtx<'a> {
    seed: u64,
    params: &'a mut Vec<Param>,
    running: &'a mut Vec<RunningStats>,
    groups: &'a mut Vec<LayerGroup>,
}

impl InitCtx<'_> {
    fn uniform(&mut self, group: usize, name: &str, shape: &[usize], fan_in: usize) {
        let bound = (1.0 / fan_in as f64).sqrt();
        let index = self.params.len();
        let mut r = rng::stream(self.seed, Stream::Init, &[index as u64]);
        let tensor = Tensor::from_fn(shape, |_| r.random_range(-bound..bound));
        self.push(group, name, tensor);
    }

    fn push(&mut self, group: usize, name: &str, tensor: Tensor) {
        let index = self.params.len();
        self.params.push(Param {
            group,
            name: name.to_string(),
            tensor,
        });
        self.groups[group].params.push(index);
    }

    fn open_group(&mut self, kind: GroupKind) -> usize {
        let id = self.groups.len();
        let n = self.groups.iter().filter(|g| g.kind == kind).count() + 1;
        let label = match kind {
            GroupKind::Conv => format!("conv{n}"),
            GroupKind::Linear => format!("fc{n}"),
        };
        self.groups.push(LayerGroup {
            id,
            label,
            kind,
            params: Vec::new(),
        });
        id
    }

    fn conv(&mut self, cin: usize, cout: usize, kernel: usize, bn: bool) {
        let g = self.open_group(GroupKind::Conv);
        self.uniform(
            g,
            "weight",
            &[cout, cin, kernel, kernel],
            cin * kernel * kernel,
        );
        if bn {
            self.batch_norm(g, cout);
        } else {
            self.uniform(g, "bias", &[cout], cin * kernel * kernel);
        }
    }

    fn batch_norm(&mut self, g: usize, c: usize) {
        self.push(g, "gamma", Tensor::full(&[c], 1.0));
        self.push(g, "beta", Tensor::zeros(&[c]));
        self.running.push(RunningStats::new(c));
    }
}

impl ModelState {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let shapes = spec.output_shapes()?;
        let (mut params, mut running, mut groups) = (Vec::new(), Vec::new(), Vec::new());
        let mut ctx = InitCtx {
            seed,
            params: &mut params,
            running: &mut running,
            groups: &mut groups,
        };
        let mut in_shape = spec.input_shape.to_vec();
        for (layer, out_shape) in spec.layers.iter().zip(&shapes) {
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    batch_norm,
                    ..
                } => ctx.conv(in_shape[0], out_channels, kernel, batch_norm),
                LayerSpec::Linear {
                    out_features,
                    batch_norm,
                    ..
                } => {
                    let g = ctx.open_group(GroupKind::Linear);
                    ctx.uniform(g, "weight", &[out_features, in_shape[0]], in_shape[0]);
                    if batch_norm {
                        ctx.batch_norm(g, out_features);
                    } else {
                        ctx.uniform(g, "bias", &[out_features], in_shape[0]);
                    }
                }
                LayerSpec::Residual {
                    out_channels,
                    stride,
                } => {
                    let cin = in_shape[0];
                    ctx.conv(cin, out_channels, 3, true);
                    ctx.conv(out_channels, out_channels, 3, true);
                    if stride != 1 || cin != out_channels {
                        ctx.conv(cin, out_channels, 1, true);
                    }
                }
                LayerSpec::Flatten | LayerSpec::GlobalAvgPool => {}
            }
            in_shape = out_shape.clone();
        }
        Ok(ModelState {
            params,
            running,
            groups,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn group_param_counts(&self) -> Vec<usize> {
        self.groups
            .iter()
            .map(|g| {
                g.params
                    .iter()
                    .map(|&i| self.params[i].tensor.numel())
                    .sum()
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds the tape gradients of every parameter into its grad slot.
    pub fn accumulate_grads(&mut self, grads: &Gradients, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.wrt(v) {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    /// Flat copy of every parameter value, in parameter order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.data().iter().copied())
            .collect()
    }

    /// SHA-256 over parameter and running-stat bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        for r in &self.running {
            for v in r.mean.iter().chain(&r.var) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Weight tensor of a convolution group.
    pub fn conv_weight(&self, group: usize) -> Result<&Tensor> {
        let g = self.groups.get(group).ok_or(Error::NotConv(group))?;
        if g.kind != GroupKind::Conv {
            return Err(Error::NotConv(group));
        }
        Ok(&self.params[g.params[0]].tensor)
    }
}

struct Cursor {
    param: usize,
    running: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub state: ModelState,
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let state = ModelState::init(&spec, seed)?;
        Ok(Model { spec, state })
    }

    /// Records the forward pass of a `[N,C,H,W]` input on `tape`.
    pub fn forward<'p>(
        &'p mut self,
        tape: &mut Tape<'p>,
        input: Var,
        mode: BatchNormMode,
    ) -> Result<Forward> {
        let spec = &self.spec;
        let ModelState {
            params, running, ..
        } = &mut self.state;
        let params: &'p [Param] = params;
        let param_vars: Vec<Var> = params.iter().map(|p| tape.param(&p.tensor)).collect();
        let mut cur = Cursor {
            param: 0,
            running: 0,
        };
        let mut x = input;
        let next = |cur: &mut Cursor| {
            cur.param += 1;
            param_vars[cur.param - 1]
        };
        for layer in &spec.layers {
            x = match *layer {
                LayerSpec::Conv {
                    kernel,
                    stride,
                    batch_norm,
                    relu,
                    ..
                } => {
                    let w = next(&mut cur);
                    let y = if batch_norm {
                        let y = tape.conv2d(x, w, None, stride, kernel / 2)?;
                        let (g, b) = (next(&mut cur), next(&mut cur));
                        let stats = &mut running[cur.running];
                        cur.running += 1;
                        tape.batch_norm(y, g, b, stats, mode)?
                    } else {
                        let b = next(&mut cur);
                        tape.conv2d(x, w, Some(b), stride, kernel / 2)?
                    };
                    if relu {
                        tape.relu(y)
                    } else {
                        y
                    }
                }
                LayerSpec::Linear {
                    batch_norm, relu, ..
                } => {
                    let w = next(&mut cur);
                    let y = if batch_norm {
                        let y = tape.linear(x, w, None)?;
                        let (g, b) = (next(&mut cur), next(&mut cur));
                        let stats = &mut running[cur.running];
                        cur.running += 1;
                        tape.batch_norm(y, g, b, stats, mode)?
                    } else {
                        let b = next(&mut cur);
                        tape.linear(x, w, Some(b))?
                    };
                    if relu {
                        tape.relu(y)
                    } else {
                        y
                    }
                }
                LayerSpec::Residual {
                    out_channels,
                    stride,
                } => {
                    let cin = tape.value(x).shape()[1];
                    let mut conv_bn = |tape: &mut Tape<'p>,
                                       cur: &mut Cursor,
                                       input: Var,
                                       stride: usize,
                                       pad: usize|
                     -> Result<Var> {
                        let w = next(cur);
                        let y = tape.conv2d(input, w, None, stride, pad)?;
                        let (g, b) = (next(cur), next(cur));
                        let stats = &mut running[cur.running];
                        cur.running += 1;
                        tape.batch_norm(y, g, b, stats, mode)
                    };
                    let h = conv_bn(tape, &mut cur, x, stride, 1)?;
                    let h = tape.relu(h);
                    let h = conv_bn(tape, &mut cur, h, 1, 1)?;
                    let skip = if stride != 1 || cin != out_channels {
                        conv_bn(tape, &mut cur, x, stride, 0)?
                    } else {
                        x
                    };
                    let sum = tape.add(h, skip)?;
                    tape.relu(sum)
                }
                LayerSpec::Flatten => tape.flatten(x)?,
                LayerSpec::GlobalAvgPool => tape.global_avg_pool(x)?,
            };
        }
        Ok(Forward {
            logits: x,
            param_vars,
        })
    }

    /// Logits for a batch without keeping the tape.
    pub fn logits(&mut self, images: &Tensor, mode: BatchNormMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let fwd = self.forward(&mut tape, x, mode)?;
        Ok(tape.value(fwd.logits).clone())
    }
}

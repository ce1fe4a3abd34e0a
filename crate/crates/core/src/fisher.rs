//! Fisher information probes.
//!
//! The trace estimator samples inputs from the training distribution and
//! labels from the model's own posterior, never from the dataset.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{Model, ModelState};
use crate::rng::{stream, Stream};
use crate::tensor::{softmax_rows, BatchNormMode, PerSample, Tape, Tensor};
use crate::training::{batch_gradients, BatchPrep, Probe, ProbeContext};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub id: usize,
    pub label: String,
    pub params: usize,
}

/// Anything that can report squared score norms `||d log p(y|x) / dw||^2`
/// per parameter group for labels drawn from its posterior.
pub trait ScoreModel: Clone + Send + Sync {
    fn groups(&self) -> Vec<GroupInfo>;

    /// Returns `[group][sample * n_y + draw]`. `draw(sample, j, posterior)`
    /// picks the label for one draw.
    fn score_sq_norms(
        &mut self,
        x: &Tensor,
        n_y: usize,
        draw: &(dyn Fn(usize, usize, &[f64]) -> usize + Sync),
    ) -> Result<Vec<Vec<f64>>>;
}

fn param_groups(state: &ModelState) -> Vec<usize> {
    state.params.iter().map(|p| p.group).collect()
}

impl ScoreModel for Model {
    fn groups(&self) -> Vec<GroupInfo> {
        let counts = self.state.group_param_counts();
        self.state
            .groups
            .iter()
            .zip(counts)
            .map(|(g, params)| GroupInfo {
                id: g.id,
                label: g.label.clone(),
                params,
            })
            .collect()
    }

    fn score_sq_norms(
        &mut self,
        x: &Tensor,
        n_y: usize,
        draw: &(dyn Fn(usize, usize, &[f64]) -> usize + Sync),
    ) -> Result<Vec<Vec<f64>>> {
        let owner = param_groups(&self.state);
        let n_groups = self.state.groups.len();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fwd = self.forward(&mut tape, xv, BatchNormMode::Eval)?;
        let z = tape.value(fwd.logits);
        let (n, k) = (z.shape()[0], z.shape()[1]);
        let post = softmax_rows(z.data(), k);
        let mut out = vec![vec![0.0; n * n_y]; n_groups];
        for j in 0..n_y {
            let targets: Vec<usize> = (0..n)
                .map(|s| draw(s, j, &post[s * k..(s + 1) * k]))
                .collect();
            let lp = tape.log_prob(fwd.logits, &targets)?;
            let r = tape.backward_per_sample(lp, PerSample::SqNorm)?;
            for (pi, var) in fwd.param_vars.iter().enumerate() {
                if let Some(v) = r.get(*var) {
                    let slot = &mut out[owner[pi]];
                    for s in 0..n {
                        slot[s * n_y + j] += v[s];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Inverse-CDF draw from a probability row.
pub fn sample_categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FimOptions {
    pub n_x: usize,
    pub n_y: usize,
    pub seed: u64,
    /// Samples per forward pass.
    pub chunk: usize,
}

impl Default for FimOptions {
    fn default() -> Self {
        FimOptions {
            n_x: 1024,
            n_y: 1,
            seed: 0,
            chunk: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer_id: usize,
    pub label: String,
    pub params: usize,
    pub trace: f64,
}

impl LayerTrace {
    pub fn per_param(&self) -> f64 {
        self.trace / self.params.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    pub epoch: usize,
    pub layers: Vec<LayerTrace>,
    /// Sum of the layer traces, in layer order.
    pub total: f64,
    /// Standard error of `total` across input samples.
    #[serde(deserialize_with = "crate::f64_or_nan")]
    pub total_stderr: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub seed: u64,
}

impl FisherReport {
    pub fn trace_of(&self, layer_id: usize) -> Option<f64> {
        self.layers
            .iter()
            .find(|l| l.layer_id == layer_id)
            .map(|l| l.trace)
    }
}

/// Samples `n` distinct indices below `len`.
pub fn sample_inputs(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > len {
        return Err(Error::invalid(format!(
            "cannot sample {n} inputs from a dataset of {len}"
        )));
    }
    let mut rng = stream(seed, Stream::FisherInputs, &[]);
    Ok(rand::seq::index::sample(&mut rng, len, n).into_vec())
}

/// Monte-Carlo estimate of the per-layer Fisher trace
/// `E_x E_{y ~ p_w(y|x)} ||d log p_w(y|x) / dw||^2`.
pub fn fim_trace_mc<M: ScoreModel>(
    model: &M,
    data: &LabeledDataset,
    prep: &BatchPrep<'_>,
    opts: &FimOptions,
    epoch: usize,
) -> Result<FisherReport> {
    if opts.n_y == 0 {
        return Err(Error::invalid("n_y must be at least 1"));
    }
    let indices = sample_inputs(data.len(), opts.n_x, opts.seed)?;
    let groups = model.groups();
    let seed = opts.seed;
    let n_y = opts.n_y;
    let chunks: Vec<(usize, &[usize])> = indices
        .chunks(opts.chunk.max(1))
        .scan(0, |offset, c| {
            let start = *offset;
            *offset += c.len();
            Some((start, c))
        })
        .collect();
    let parts: Vec<Vec<Vec<f64>>> = chunks
        .par_iter()
        .map(|&(start, idx)| {
            let (x, _) = prep.prepare(data, idx)?;
            let draw = move |s: usize, j: usize, p: &[f64]| {
                let u: f64 =
                    stream(seed, Stream::FisherLabels, &[(start + s) as u64, j as u64]).random();
                sample_categorical(p, u)
            };
            model.clone().score_sq_norms(&x, n_y, &draw)
        })
        .collect::<Result<_>>()?;

    let count = (opts.n_x * n_y) as f64;
    let mut layers: Vec<LayerTrace> = groups
        .iter()
        .map(|g| LayerTrace {
            layer_id: g.id,
            label: g.label.clone(),
            params: g.params,
            trace: 0.0,
        })
        .collect();
    let mut per_input = vec![0.0; opts.n_x];
    for ((start, _), part) in chunks.iter().zip(&parts) {
        for (layer, values) in layers.iter_mut().zip(part) {
            for (i, v) in values.iter().enumerate() {
                layer.trace += v / count;
                per_input[start + i / n_y] += v / n_y as f64;
            }
        }
    }
    let total: f64 = layers.iter().map(|l| l.trace).sum();
    let mean = per_input.iter().sum::<f64>() / opts.n_x as f64;
    let var = if opts.n_x > 1 {
        per_input.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (opts.n_x - 1) as f64
    } else {
        0.0
    };
    Ok(FisherReport {
        epoch,
        layers,
        total,
        total_stderr: (var / opts.n_x as f64).sqrt(),
        n_x: opts.n_x,
        n_y,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelDraws {
    /// `n` labels per input sampled from the posterior.
    Sampled(usize),
    /// Exact expectation over all classes.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlCheck {
    /// `E_x KL(p_{w + dw} || p_w)`
    pub kl: f64,
    /// `E[(dw . grad log p)^2] / 2`, the second-order term of the KL.
    pub quadratic: f64,
    /// `E[(dw . grad log p)^2]` without the one-half factor.
    pub raw_quadratic: f64,
}

impl KlCheck {
    pub fn ratio(&self) -> f64 {
        self.kl / self.quadratic
    }
}

/// Compares the empirical KL after perturbing the weights by `delta` (one
/// vector per parameter tensor) with the Fisher quadratic form.
pub fn kl_quadratic_check(
    model: &Model,
    data: &LabeledDataset,
    prep: &BatchPrep<'_>,
    delta: &[Vec<f64>],
    n_x: usize,
    draws: LabelDraws,
    seed: u64,
) -> Result<KlCheck> {
    if delta.len() != model.state.params.len() {
        return Err(Error::invalid(
            "one perturbation per parameter tensor required",
        ));
    }
    let indices = sample_inputs(data.len(), n_x, seed)?;
    let mut base = model.clone();
    let mut moved = model.clone();
    for (p, d) in moved.state.params.iter_mut().zip(delta) {
        if d.len() != p.tensor.numel() {
            return Err(Error::ShapeMismatch {
                op: "perturbation",
                lhs: p.tensor.shape().to_vec(),
                rhs: vec![d.len()],
            });
        }
        p.tensor
            .data_mut()
            .iter_mut()
            .zip(d)
            .for_each(|(w, dw)| *w += dw);
    }
    let (mut kl, mut quad) = (0.0, 0.0);
    for (c, idx) in indices.chunks(128).enumerate() {
        let (x, _) = prep.prepare(data, idx)?;
        let z1 = moved.logits(&x, BatchNormMode::Eval)?;
        let k = z1.shape()[1];
        let p1 = softmax_rows(z1.data(), k);

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fwd = base.forward(&mut tape, xv, BatchNormMode::Eval)?;
        let p0 = softmax_rows(tape.value(fwd.logits).data(), k);
        for (a, b) in p1.iter().zip(&p0) {
            if *a > 0.0 {
                kl += a * (a.ln() - b.ln());
            }
        }
        let dirs: HashMap<_, _> = fwd
            .param_vars
            .iter()
            .zip(delta)
            .map(|(v, d)| (*v, d.clone()))
            .collect();
        let n = idx.len();
        let mut dot_sq = |targets: &[usize], weights: &[f64]| -> Result<f64> {
            let lp = tape.log_prob(fwd.logits, targets)?;
            let r = tape.backward_per_sample(lp, PerSample::Dot(&dirs))?;
            Ok(r.totals().iter().zip(weights).map(|(d, w)| w * d * d).sum())
        };
        match draws {
            LabelDraws::Exact => {
                for class in 0..k {
                    let weights: Vec<f64> = (0..n).map(|s| p0[s * k + class]).collect();
                    quad += dot_sq(&vec![class; n], &weights)?;
                }
            }
            LabelDraws::Sampled(n_y) => {
                for j in 0..n_y {
                    let targets: Vec<usize> = (0..n)
                        .map(|s| {
                            let u: f64 = stream(
                                seed,
                                Stream::FisherLabels,
                                &[(c * 128 + s) as u64, j as u64],
                            )
                            .random();
                            sample_categorical(&p0[s * k..(s + 1) * k], u)
                        })
                        .collect();
                    quad += dot_sq(&targets, &vec![1.0 / n_y as f64; n])?;
                }
            }
        }
    }
    let raw = quad / n_x as f64;
    Ok(KlCheck {
        kl: kl / n_x as f64,
        quadratic: raw / 2.0,
        raw_quadratic: raw,
    })
}

/// A differentiable scalar function of a flat weight vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value_grad(&mut self, w: &[f64], grad: &mut [f64]) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationalConfig {
    pub beta: f64,
    pub steps: usize,
    /// Step size on the log-std.
    pub fit_lr: f64,
    /// Antithetic noise pairs per step.
    pub pairs: usize,
    /// Starting log-std; defaults to `ln(beta) / 2`.
    pub rho_init: Option<f64>,
    pub rho_max: f64,
    pub seed: u64,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        VariationalConfig {
            beta: 0.01,
            steps: 2000,
            fit_lr: 0.01,
            pairs: 4,
            rho_init: None,
            rho_max: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalSigma {
    /// Per-parameter log standard deviation; `Sigma_ii = exp(2 rho_i)`.
    pub rho: Vec<f64>,
    pub beta: f64,
    /// Parameters whose log-std hit the clamp.
    pub unconstrained: Vec<usize>,
    /// Final value of the objective estimate.
    pub objective: f64,
}

impl VariationalSigma {
    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|r| (2.0 * r).exp()).collect()
    }

    /// Implied curvature `beta / Sigma_ii`.
    pub fn curvature(&self) -> Vec<f64> {
        self.rho
            .iter()
            .map(|r| self.beta / (2.0 * r).exp())
            .collect()
    }

    pub fn trace(&self) -> f64 {
        self.curvature().iter().sum()
    }
}

const GRAD_CLIP: f64 = 10.0;

/// Minimizes `E[L(w0 + exp(rho) * eps)] - beta * sum(2 rho)` over `rho` with
/// antithetic reparameterized gradients.
pub fn fit_variational(
    obj: &mut dyn Objective,
    w0: &[f64],
    cfg: &VariationalConfig,
) -> Result<VariationalSigma> {
    let d = obj.dim();
    if w0.len() != d {
        return Err(Error::invalid("w0 length does not match objective"));
    }
    if !(cfg.beta > 0.0) || cfg.pairs == 0 {
        return Err(Error::invalid("beta must be positive and pairs at least 1"));
    }
    let mut rho = vec![cfg.rho_init.unwrap_or(0.5 * cfg.beta.ln()); d];
    let mut rng = stream(cfg.seed, Stream::Variational, &[]);
    let mut grad_l = vec![0.0; d];
    let mut w = vec![0.0; d];
    let mut g_rho = vec![0.0; d];
    let mut objective = 0.0;
    // Plain SGD on the gradient divided by 2 beta, so the stationary point
    // is where the noise term matches beta. Sign-normalizing optimizers bias
    // the fit because the per-step estimate is skewed (chi-square-like).
    // Iterates after the first quarter are averaged.
    let tail_start = cfg.steps / 4;
    let mut tail = vec![0.0; d];
    // Control variate on the mean of eps_i^2, which has expectation 1; its
    // coefficient is a running average of past estimates so it stays
    // independent of the current draw.
    let mut cv = vec![0.0; d];
    let mut eps_sq = vec![0.0; d];
    for t in 0..cfg.steps {
        g_rho.iter_mut().for_each(|g| *g = 0.0);
        eps_sq.iter_mut().for_each(|e| *e = 0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.pairs {
            let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            eps_sq
                .iter_mut()
                .zip(&eps)
                .for_each(|(a, e)| *a += e * e / cfg.pairs as f64);
            for sign in [1.0, -1.0] {
                for i in 0..d {
                    w[i] = w0[i] + sign * rho[i].exp() * eps[i];
                }
                loss += obj.value_grad(&w, &mut grad_l)?;
                for i in 0..d {
                    g_rho[i] += grad_l[i] * sign * rho[i].exp() * eps[i];
                }
            }
        }
        let scale = 1.0 / (2 * cfg.pairs) as f64;
        objective = loss * scale - cfg.beta * 2.0 * rho.iter().sum::<f64>();
        for i in 0..d {
            let raw = g_rho[i] * scale;
            let g = (raw - cv[i] * (eps_sq[i] - 1.0)) / (2.0 * cfg.beta) - 1.0;
            cv[i] = if t == 0 { raw } else { 0.9 * cv[i] + 0.1 * raw };
            if !g.is_finite() {
                return Err(Error::Degenerate(format!(
                    "variational gradient not finite at step {t}"
                )));
            }
            rho[i] -= cfg.fit_lr * g.clamp(-GRAD_CLIP, GRAD_CLIP);
            rho[i] = rho[i].min(cfg.rho_max);
        }
        if t >= tail_start {
            tail.iter_mut().zip(&rho).for_each(|(a, r)| *a += r);
        }
    }
    let unconstrained = rho
        .iter()
        .enumerate()
        .filter(|(_, r)| **r >= cfg.rho_max)
        .map(|(i, _)| i)
        .collect();
    if cfg.steps > 0 {
        let n_tail = (cfg.steps - tail_start) as f64;
        rho = tail.into_iter().map(|a| a / n_tail).collect();
    }
    Ok(VariationalSigma {
        rho,
        beta: cfg.beta,
        unconstrained,
        objective,
    })
}

/// Mean training cross-entropy of a model on a fixed prepared batch.
pub struct ModelObjective {
    model: Model,
    x: Tensor,
    labels: Vec<usize>,
}

impl ModelObjective {
    pub fn new(model: &Model, x: Tensor, labels: Vec<usize>) -> Self {
        ModelObjective {
            model: model.clone(),
            x,
            labels,
        }
    }
}

impl Objective for ModelObjective {
    fn dim(&self) -> usize {
        self.model.state.param_count()
    }

    fn value_grad(&mut self, w: &[f64], grad: &mut [f64]) -> Result<f64> {
        let mut offset = 0;
        for p in &mut self.model.state.params {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&w[offset..offset + n]);
            offset += n;
        }
        let (loss, grads) = batch_gradients(
            &mut self.model,
            self.x.clone(),
            &self.labels,
            BatchNormMode::Eval,
        )?;
        let mut offset = 0;
        for g in grads {
            grad[offset..offset + g.len()].copy_from_slice(&g);
            offset += g.len();
        }
        Ok(loss)
    }
}

/// Variational estimate on `n_x` training samples with their true labels;
/// returns the fit and its curvature trace per layer group.
pub fn fim_variational(
    model: &Model,
    data: &LabeledDataset,
    prep: &BatchPrep<'_>,
    n_x: usize,
    cfg: &VariationalConfig,
    epoch: usize,
) -> Result<(VariationalSigma, FisherReport)> {
    let idx = sample_inputs(data.len(), n_x, cfg.seed)?;
    let (x, y) = prep.prepare(data, &idx)?;
    let w0 = model.state.flat_values();
    let mut obj = ModelObjective::new(model, x, y);
    let fit = fit_variational(&mut obj, &w0, cfg)?;
    let h = fit.curvature();
    let mut offset = 0;
    let mut layers: Vec<LayerTrace> = model
        .groups()
        .into_iter()
        .map(|g| LayerTrace {
            layer_id: g.id,
            label: g.label,
            params: g.params,
            trace: 0.0,
        })
        .collect();
    for p in &model.state.params {
        let n = p.tensor.numel();
        layers[p.group].trace += h[offset..offset + n].iter().sum::<f64>();
        offset += n;
    }
    let total = layers.iter().map(|l| l.trace).sum();
    Ok((
        fit,
        FisherReport {
            epoch,
            layers,
            total,
            total_stderr: f64::NAN,
            n_x,
            n_y: 0,
            seed: cfg.seed,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGradStat {
    pub layer_id: usize,
    pub label: String,
    /// `||mean_b g_b||`
    pub mean_norm: f64,
    /// `||std_b g_b||`, elementwise sample standard deviation.
    pub std_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradStats {
    pub epoch: usize,
    pub n_batches: usize,
    pub layers: Vec<LayerGradStat>,
}

/// Per-layer norms of the mean and elementwise standard deviation of
/// per-batch gradients laid out `[batch][param tensor][value]`.
pub fn summarize_gradients(
    per_batch: &[Vec<Vec<f64>>],
    state: &ModelState,
) -> Result<Vec<LayerGradStat>> {
    let nb = per_batch.len();
    if nb < 2 {
        return Err(Error::invalid(format!(
            "gradient statistics need at least 2 batches, got {nb}"
        )));
    }
    let mut mean_sq = vec![0.0; state.groups.len()];
    let mut var_sum = vec![0.0; state.groups.len()];
    for (pi, p) in state.params.iter().enumerate() {
        for j in 0..p.tensor.numel() {
            let mean = per_batch.iter().map(|b| b[pi][j]).sum::<f64>() / nb as f64;
            let var = per_batch
                .iter()
                .map(|b| (b[pi][j] - mean).powi(2))
                .sum::<f64>()
                / (nb - 1) as f64;
            mean_sq[p.group] += mean * mean;
            var_sum[p.group] += var;
        }
    }
    Ok(state
        .groups
        .iter()
        .map(|g| LayerGradStat {
            layer_id: g.id,
            label: g.label.clone(),
            mean_norm: mean_sq[g.id].sqrt(),
            std_norm: var_sum[g.id].sqrt(),
        })
        .collect())
}

/// Gradient statistics of the true-label cross-entropy over `n_batches`
/// disjoint batches, batch norm in eval mode.
pub fn grad_stats(
    model: &Model,
    data: &LabeledDataset,
    prep: &BatchPrep<'_>,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<GradStats> {
    if n_batches < 2 {
        return Err(Error::invalid(
            "gradient statistics need at least 2 batches",
        ));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rand::seq::SliceRandom::shuffle(
        &mut order[..],
        &mut stream(seed, Stream::GradStats, &[epoch as u64]),
    );
    if n_batches * batch_size > order.len() {
        return Err(Error::invalid(format!(
            "{n_batches} batches of {batch_size} exceed {} samples",
            order.len()
        )));
    }
    let mut m = model.clone();
    let per_batch = order
        .chunks(batch_size)
        .take(n_batches)
        .map(|idx| {
            let (x, y) = prep.prepare(data, idx)?;
            Ok(batch_gradients(&mut m, x, &y, BatchNormMode::Eval)?.1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradStats {
        epoch,
        n_batches,
        layers: summarize_gradients(&per_batch, &model.state)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Layer trace over the total at the same epoch.
    ShareOfTotal,
    /// Layer trace over that layer's maximum across epochs.
    PerLayerPeak,
}

/// `[report][layer]` normalized traces.
pub fn normalize_layerwise(reports: &[FisherReport], mode: Normalization) -> Result<Vec<Vec<f64>>> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to normalize"));
    }
    match mode {
        Normalization::ShareOfTotal => reports
            .iter()
            .map(|r| {
                if !(r.total > 0.0) {
                    return Err(Error::Degenerate(format!(
                        "total trace at epoch {} is zero",
                        r.epoch
                    )));
                }
                Ok(r.layers.iter().map(|l| l.trace / r.total).collect())
            })
            .collect(),
        Normalization::PerLayerPeak => {
            let n = reports[0].layers.len();
            let peaks: Vec<f64> = (0..n)
                .map(|i| {
                    reports
                        .iter()
                        .map(|r| r.layers[i].trace)
                        .fold(0.0, f64::max)
                })
                .collect();
            if peaks.iter().all(|p| *p == 0.0) {
                return Err(Error::Degenerate("all traces are zero".into()));
            }
            Ok(reports
                .iter()
                .map(|r| {
                    r.layers
                        .iter()
                        .zip(&peaks)
                        .map(|(l, p)| if *p > 0.0 { l.trace / p } else { 0.0 })
                        .collect()
                })
                .collect())
        }
    }
}

/// Training probe collecting Fisher traces and, optionally, gradient
/// statistics at every probe epoch.
#[derive(Default)]
pub struct FisherProbe {
    pub opts: FimOptions,
    /// `(n_batches, batch_size)` for gradient statistics.
    pub grad_batches: Option<(usize, usize)>,
    pub reports: Vec<FisherReport>,
    pub grad_stats: Vec<GradStats>,
}

impl FisherProbe {
    pub fn new(opts: FimOptions) -> Self {
        FisherProbe {
            opts,
            ..Default::default()
        }
    }
}

impl Probe for FisherProbe {
    fn probe(&mut self, model: &mut Model, ctx: &ProbeContext<'_>) -> Result<()> {
        let report = fim_trace_mc(&*model, ctx.train, &ctx.prep, &self.opts, ctx.epoch)?;
        tracing::debug!(epoch = ctx.epoch, total = report.total, "fisher probe");
        self.reports.push(report);
        if let Some((nb, bs)) = self.grad_batches {
            let gs = grad_stats(
                model,
                ctx.train,
                &ctx.prep,
                nb,
                bs,
                self.opts.seed,
                ctx.epoch,
            )?;
            self.grad_stats.push(gs);
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct FisherRow<'a> {
    epoch: usize,
    layer_id: usize,
    trace: f64,
    total: f64,
    n_x: usize,
    n_y: usize,
    seed: u64,
    #[serde(skip)]
    _label: &'a str,
}

/// `epoch,layer_id,trace,total,n_x,n_y,seed`
pub fn write_fisher_csv(path: &Path, reports: &[FisherReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        for l in &r.layers {
            w.serialize(FisherRow {
                epoch: r.epoch,
                layer_id: l.layer_id,
                trace: l.trace,
                total: r.total,
                n_x: r.n_x,
                n_y: r.n_y,
                seed: r.seed,
                _label: &l.label,
            })?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Per-parameter variant: `epoch,layer_id,label,params,trace_per_param,share`.
pub fn write_fisher_detail_csv(path: &Path, reports: &[FisherReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "layer_id",
        "label",
        "params",
        "trace_per_param",
        "share",
    ])?;
    for r in reports {
        for l in &r.layers {
            let share = if r.total > 0.0 {
                l.trace / r.total
            } else {
                0.0
            };
            w.write_record([
                r.epoch.to_string(),
                l.layer_id.to_string(),
                l.label.clone(),
                l.params.to_string(),
                l.per_param().to_string(),
                share.to_string(),
            ])?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// `epoch,layer_id,label,mean_norm,std_norm`
pub fn write_grad_stats_csv(path: &Path, stats: &[GradStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "layer_id", "label", "mean_norm", "std_norm"])?;
    for s in stats {
        for l in &s.layers {
            w.write_record([
                s.epoch.to_string(),
                l.layer_id.to_string(),
                l.label.clone(),
                l.mean_norm.to_string(),
                l.std_norm.to_string(),
            ])?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

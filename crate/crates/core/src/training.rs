//! Optimizers, the learning-rate schedule and the epoch loop.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, epoch_order, LabeledDataset, Normalizer};
use crate::deficits::{DeficitPlan, DeficitSchedule};
use crate::error::{Error, Result};
use crate::models::checkpoint::Checkpoint;
use crate::models::{Model, ModelSpec, ModelState};
use crate::tensor::{BatchNormMode, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr0: f64,
    /// Per-epoch multiplicative decay; 1 keeps the rate fixed.
    pub lr_decay: f64,
    pub weight_decay: f64,
    /// SGD only. Off by default.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub deficit: DeficitSchedule,
    pub probe_epochs: Vec<usize>,
    pub augment: bool,
    pub normalize: bool,
    pub checkpoint_epochs: Vec<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr0: 0.05,
            lr_decay: 0.97,
            weight_decay: 0.001,
            momentum: 0.0,
            batch_size: 128,
            epochs: 0,
            seed: 0,
            deficit: DeficitSchedule::none(),
            probe_epochs: Vec::new(),
            augment: true,
            normalize: true,
            checkpoint_epochs: Vec::new(),
            checkpoint_dir: None,
            eval_batch: 500,
        }
    }
}

impl TrainConfig {
    /// Adam with its customary rate and weight decay.
    pub fn adam() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr0: 0.001,
            weight_decay: 1e-4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::invalid(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "weight_decay >= 0 and momentum in [0, 1) required",
            ));
        }
        if self.batch_size < 2 || self.eval_batch == 0 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        self.deficit.validate()
    }
}

pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi(epoch as i32)
}

fn check_finite(state: &ModelState, grads: &[Vec<f64>]) -> Result<()> {
    for (p, g) in state.params.iter().zip(grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                layer: state.groups[p.group].label.clone(),
                param: p.name.clone(),
            });
        }
    }
    Ok(())
}

/// `w -= lr * (g + weight_decay * w)`
pub fn sgd_step(
    state: &mut ModelState,
    grads: &[Vec<f64>],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    check_finite(state, grads)?;
    for (p, g) in state.params.iter_mut().zip(grads) {
        for (w, &gi) in p.tensor.data_mut().iter_mut().zip(g) {
            *w -= lr * (gi + weight_decay * *w);
        }
    }
    Ok(())
}

/// Heavy-ball SGD, `v = mu * v + g + wd * w; w -= lr * v`.
pub fn sgd_momentum_step(
    state: &mut ModelState,
    grads: &[Vec<f64>],
    velocity: &mut Vec<Vec<f64>>,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
) -> Result<()> {
    check_finite(state, grads)?;
    if velocity.is_empty() {
        *velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
    }
    for ((p, g), v) in state.params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((w, &gi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *w;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// Bias-corrected Adam with weight decay folded into the gradient.
pub fn adam_step(
    state: &mut ModelState,
    grads: &[Vec<f64>],
    adam: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    check_finite(state, grads)?;
    if adam.m.is_empty() {
        adam.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        adam.v = adam.m.clone();
    }
    adam.step += 1;
    let c1 = 1.0 - adam.beta1.powi(adam.step as i32);
    let c2 = 1.0 - adam.beta2.powi(adam.step as i32);
    for (i, (p, g)) in state.params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut adam.m[i], &mut adam.v[i]);
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gj = g[j] + weight_decay * *w;
            m[j] = adam.beta1 * m[j] + (1.0 - adam.beta1) * gj;
            v[j] = adam.beta2 * v[j] + (1.0 - adam.beta2) * gj * gj;
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + adam.eps);
        }
    }
    Ok(())
}

enum Optimizer {
    Sgd(Vec<Vec<f64>>),
    Adam(AdamState),
}

impl Optimizer {
    fn step(
        &mut self,
        cfg: &TrainConfig,
        state: &mut ModelState,
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<()> {
        match self {
            Optimizer::Sgd(_) if cfg.momentum == 0.0 => {
                sgd_step(state, grads, lr, cfg.weight_decay)
            }
            Optimizer::Sgd(v) => {
                sgd_momentum_step(state, grads, v, lr, cfg.weight_decay, cfg.momentum)
            }
            Optimizer::Adam(a) => adam_step(state, grads, a, lr, cfg.weight_decay),
        }
    }
}

/// Turns raw samples into network inputs: deficit (if any), then
/// normalization. Augmentation is applied separately, training only.
#[derive(Clone, Copy)]
pub struct BatchPrep<'a> {
    pub plan: Option<&'a DeficitPlan>,
    pub deficit_epoch: usize,
    pub normalizer: &'a Normalizer,
}

impl<'a> BatchPrep<'a> {
    pub fn clean(normalizer: &'a Normalizer) -> Self {
        BatchPrep {
            plan: None,
            deficit_epoch: 0,
            normalizer,
        }
    }

    pub fn prepare(
        &self,
        data: &LabeledDataset,
        indices: &[usize],
    ) -> Result<(Tensor, Vec<usize>)> {
        let (mut x, mut y) = data.gather(indices);
        if let Some(plan) = self.plan {
            plan.apply(self.deficit_epoch, &mut x, &mut y, indices)?;
        }
        self.normalizer.apply(&mut x);
        Ok((x, y))
    }
}

pub struct ProbeContext<'a> {
    /// Number of completed training epochs.
    pub epoch: usize,
    pub train: &'a LabeledDataset,
    /// Inputs as the network currently sees them, deficit included.
    pub prep: BatchPrep<'a>,
    pub seed: u64,
}

pub trait Probe {
    fn probe(&mut self, model: &mut Model, ctx: &ProbeContext<'_>) -> Result<()>;
}

pub struct NoProbe;

impl Probe for NoProbe {
    fn probe(&mut self, _: &mut Model, _: &ProbeContext<'_>) -> Result<()> {
        Ok(())
    }
}

impl<F> Probe for F
where
    F: FnMut(&mut Model, &ProbeContext<'_>) -> Result<()>,
{
    fn probe(&mut self, model: &mut Model, ctx: &ProbeContext<'_>) -> Result<()> {
        self(model, ctx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub history: Vec<EpochRecord>,
    pub model: Model,
    pub normalizer: Normalizer,
}

impl TrainResult {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.history.last().map(|r| r.test_acc)
    }
}

/// Gradients of the mean cross-entropy for one batch, in parameter order.
pub fn batch_gradients(
    model: &mut Model,
    x: Tensor,
    labels: &[usize],
    mode: BatchNormMode,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let fwd = model.forward(&mut tape, xv, mode)?;
    let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
    if !loss.loss.is_finite() {
        return Ok((loss.loss, Vec::new()));
    }
    let g = tape.backward(loss.var)?;
    let grads = fwd
        .param_vars
        .iter()
        .map(|&v| g.wrt(v).expect("parameter reached by backward").to_vec())
        .collect();
    Ok((loss.loss, grads))
}

/// Fraction of argmax-correct predictions with batch-norm in eval mode.
pub fn evaluate(
    model: &mut Model,
    data: &LabeledDataset,
    normalizer: &Normalizer,
    batch: usize,
) -> Result<f64> {
    let prep = BatchPrep::clean(normalizer);
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let (x, y) = prep.prepare(data, chunk)?;
        let z = model.logits(&x, BatchNormMode::Eval)?;
        let k = z.shape()[1];
        for (row, &label) in z.data().chunks(k).zip(&y) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += (best == label) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn save_checkpoint(
    model: &Model,
    dir: &Path,
    name: &str,
    epoch: usize,
    seed: u64,
) -> Result<PathBuf> {
    let path = dir.join(name);
    Checkpoint::from_state(&model.spec, &model.state, epoch as u64, seed).write(&path)?;
    Ok(path)
}

pub fn train(
    spec: ModelSpec,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    cfg: &TrainConfig,
    probe: &mut dyn Probe,
) -> Result<TrainResult> {
    let model = Model::new(spec, cfg.seed)?;
    train_model(model, train_set, test_set, cfg, probe)
}

/// Runs the epoch loop on an existing model. Probes at `p` run after `p`
/// completed epochs and see inputs as they were during epoch `p - 1`.
pub fn train_model(
    mut model: Model,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    cfg: &TrainConfig,
    probe: &mut dyn Probe,
) -> Result<TrainResult> {
    cfg.validate()?;
    let normalizer = if cfg.normalize {
        Normalizer::fit(train_set)
    } else {
        Normalizer::identity(train_set.image_shape()[0])
    };
    let plan = DeficitPlan::new(cfg.deficit, train_set, cfg.seed)?;
    let mut optimizer = match cfg.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd(Vec::new()),
        OptimizerKind::Adam => Optimizer::Adam(AdamState::default()),
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let run_probe = |model: &mut Model, probe: &mut dyn Probe, epoch: usize| -> Result<()> {
        if !cfg.probe_epochs.contains(&epoch) {
            return Ok(());
        }
        let ctx = ProbeContext {
            epoch,
            train: train_set,
            prep: BatchPrep {
                plan: Some(&plan),
                deficit_epoch: epoch.saturating_sub(1),
                normalizer: &normalizer,
            },
            seed: cfg.seed,
        };
        probe.probe(model, &ctx)
    };
    run_probe(&mut model, probe, 0)?;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let (mut x, mut y) = train_set.gather(idx);
            plan.apply(epoch, &mut x, &mut y, idx)?;
            if cfg.augment {
                augment_batch(&mut x, cfg.seed, epoch, b);
            }
            normalizer.apply(&mut x);
            let (loss, grads) = batch_gradients(&mut model, x, &y, BatchNormMode::Train)?;
            if !loss.is_finite() {
                let checkpoint = match &cfg.checkpoint_dir {
                    Some(dir) => Some(save_checkpoint(
                        &model,
                        dir,
                        "diverged.ckpt",
                        epoch,
                        cfg.seed,
                    )?),
                    None => None,
                };
                return Err(Error::Diverged {
                    epoch,
                    loss,
                    checkpoint,
                });
            }
            optimizer.step(cfg, &mut model.state, &grads, lr)?;
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let test_acc = evaluate(&mut model, test_set, &normalizer, cfg.eval_batch)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            test_acc,
        };
        tracing::debug!(epoch, lr, loss = record.train_loss, acc = test_acc, "epoch");
        history.push(record);
        if let (Some(dir), true) = (
            &cfg.checkpoint_dir,
            cfg.checkpoint_epochs.contains(&(epoch + 1)),
        ) {
            save_checkpoint(
                &model,
                dir,
                &format!("epoch{:04}.ckpt", epoch + 1),
                epoch + 1,
                cfg.seed,
            )?;
        }
        run_probe(&mut model, probe, epoch + 1)?;
    }
    Ok(TrainResult {
        history,
        model,
        normalizer,
    })
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

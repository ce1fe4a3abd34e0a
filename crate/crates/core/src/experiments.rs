//! Protocol runners: deficit sweeps, Fisher timelines and the
//! sensitivity-to-Fisher correlation, with CSV output and a manifest that
//! can re-run any arm.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    export_filters, fit_double_exp, fit_exp_link, smoothness_indices, DoubleExpFit, ExpLinkFit,
    FilterGrid,
};
use crate::config::{hash_json, ExperimentConfig, FitKind};
use crate::data::LabeledDataset;
use crate::deficits::{DeficitKind, DeficitSchedule};
use crate::error::{Error, Result};
use crate::fisher::{
    normalize_layerwise, write_grad_stats_csv, FimOptions, FisherProbe, FisherReport, GradStats,
    Normalization,
};
use crate::models::checkpoint::Checkpoint;
use crate::models::{build_vardepth, Model, ModelSpec};
use crate::rng::{derive_seed, Stream};
use crate::training::{train, EpochRecord, NoProbe, TrainConfig};

pub const CODE_VERSION: &str = concat!("critlab-core ", env!("CARGO_PKG_VERSION"));

/// Everything needed to train one arm; re-running it reproduces the result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub id: String,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub fisher: Option<FimOptions>,
    pub grad_batches: Option<(usize, usize)>,
}

impl ArmSpec {
    /// Hash of everything except the id.
    pub fn hash(&self) -> String {
        hash_json(&(&self.model, &self.train, &self.fisher, &self.grad_batches))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ArmStatus {
    Ok,
    Failed { reason: String },
}

impl ArmStatus {
    pub fn label(&self) -> &str {
        match self {
            ArmStatus::Ok => "ok",
            ArmStatus::Failed { .. } => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub id: String,
    pub status: ArmStatus,
    pub history: Vec<EpochRecord>,
    pub fisher: Vec<FisherReport>,
    pub grad_stats: Vec<GradStats>,
    /// Digest of the final weights.
    pub digest: Option<String>,
    pub seconds: f64,
}

impl ArmResult {
    pub fn ok(&self) -> bool {
        self.status == ArmStatus::Ok
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        if !self.ok() {
            return None;
        }
        self.history.last().map(|r| r.test_acc)
    }

    pub fn final_error(&self) -> Option<f64> {
        self.final_accuracy().map(|a| 1.0 - a)
    }

    /// Hash of the per-epoch record, for reproducibility checks.
    pub fn history_hash(&self) -> String {
        hash_json(&self.history)
    }
}

/// Train and test sets shared by all arms of a command.
pub struct Workload {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl Workload {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, test) = cfg.data.load(cfg.train.seed)?;
        Ok(Workload { train, test })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.train.image_shape()
    }

    pub fn classes(&self) -> usize {
        self.train.class_count
    }
}

fn execute(arm: &ArmSpec, data: &Workload) -> (ArmResult, Option<Model>) {
    let start = Instant::now();
    let mut probe = FisherProbe::new(arm.fisher.clone().unwrap_or_default());
    probe.grad_batches = arm.grad_batches;
    let mut train_cfg = arm.train.clone();
    let outcome = if arm.fisher.is_some() {
        train(
            arm.model.clone(),
            &data.train,
            &data.test,
            &train_cfg,
            &mut probe,
        )
    } else {
        train_cfg.probe_epochs.clear();
        train(
            arm.model.clone(),
            &data.train,
            &data.test,
            &train_cfg,
            &mut NoProbe,
        )
    };
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(res) => {
            tracing::info!(arm = %arm.id, acc = ?res.final_accuracy(), seconds, "arm finished");
            (
                ArmResult {
                    id: arm.id.clone(),
                    status: ArmStatus::Ok,
                    digest: Some(res.model.state.digest()),
                    history: res.history,
                    fisher: probe.reports,
                    grad_stats: probe.grad_stats,
                    seconds,
                },
                Some(res.model),
            )
        }
        Err(e) => {
            tracing::warn!(arm = %arm.id, error = %e, "arm failed");
            (
                ArmResult {
                    id: arm.id.clone(),
                    status: ArmStatus::Failed {
                        reason: e.to_string(),
                    },
                    history: Vec::new(),
                    fisher: probe.reports,
                    grad_stats: probe.grad_stats,
                    digest: None,
                    seconds,
                },
                None,
            )
        }
    }
}

/// Trains one arm. Failures are reported in the result, not returned.
pub fn run_arm(arm: &ArmSpec, data: &Workload) -> ArmResult {
    execute(arm, data).0
}

/// Called after every finished arm with `(result, done, total)`.
pub type Progress<'a> = dyn Fn(&ArmResult, usize, usize) + Sync + 'a;

/// Runs arms on up to `workers` threads. Arms with identical settings are
/// trained once and their result shared. Output order follows `arms`.
pub fn run_arms(
    arms: &[ArmSpec],
    data: &Workload,
    workers: usize,
    progress: &Progress<'_>,
) -> Result<Vec<ArmResult>> {
    let mut ids = std::collections::HashSet::new();
    if let Some(dup) = arms.iter().find(|a| !ids.insert(a.id.as_str())) {
        return Err(Error::invalid(format!("duplicate arm id {}", dup.id)));
    }
    let mut unique: Vec<&ArmSpec> = Vec::new();
    let mut slot_of = Vec::with_capacity(arms.len());
    let mut by_hash: HashMap<String, usize> = HashMap::new();
    for arm in arms {
        let slot = *by_hash.entry(arm.hash()).or_insert_with(|| {
            unique.push(arm);
            unique.len() - 1
        });
        slot_of.push(slot);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let done = AtomicUsize::new(0);
    let total = unique.len();
    let results: Vec<ArmResult> = pool.install(|| {
        unique
            .par_iter()
            .map(|arm| {
                let r = run_arm(arm, data);
                progress(&r, done.fetch_add(1, Ordering::SeqCst) + 1, total);
                r
            })
            .collect()
    });
    Ok(arms
        .iter()
        .zip(slot_of)
        .map(|(arm, slot)| ArmResult {
            id: arm.id.clone(),
            ..results[slot].clone()
        })
        .collect())
}

fn arm_seed(cfg: &ExperimentConfig, index: usize) -> u64 {
    if cfg.sweep.reseed_arms {
        derive_seed(cfg.train.seed, Stream::Arm, &[index as u64])
    } else {
        cfg.train.seed
    }
}

fn base_arm(cfg: &ExperimentConfig, data: &Workload, id: String) -> Result<ArmSpec> {
    let mut train = cfg.train.clone();
    train.deficit = DeficitSchedule::none();
    train.probe_epochs.clear();
    train.checkpoint_epochs.clear();
    train.checkpoint_dir = None;
    Ok(ArmSpec {
        id,
        model: cfg.model.build(data.input_shape(), data.classes())?,
        train,
        fisher: None,
        grad_batches: None,
    })
}

fn arm_with(
    base: &ArmSpec,
    id: String,
    epochs: usize,
    deficit: DeficitSchedule,
    seed: u64,
) -> ArmSpec {
    let mut arm = base.clone();
    arm.id = id;
    arm.train.epochs = epochs;
    arm.train.deficit = deficit;
    arm.train.seed = seed;
    arm
}

fn find<'a>(results: &'a [ArmResult], id: &str) -> &'a ArmResult {
    results
        .iter()
        .find(|r| r.id == id)
        .expect("arm result present")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalRow {
    pub deficit: DeficitKind,
    pub t0: usize,
    pub epochs: usize,
    pub permanent: bool,
    pub final_accuracy: Option<f64>,
    pub final_error: Option<f64>,
    pub status: String,
    pub seed: u64,
    pub arm_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub post_epochs: usize,
    pub baseline: String,
    pub rows: Vec<RemovalRow>,
}

impl SweepResult {
    pub fn row(&self, deficit: DeficitKind, t0: usize, permanent: bool) -> Option<&RemovalRow> {
        self.rows
            .iter()
            .find(|r| r.deficit == deficit && r.t0 == t0 && r.permanent == permanent)
    }

    pub fn baseline_error(&self) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.arm_id == self.baseline)
            .and_then(|r| r.final_error)
    }
}

/// Arms for the removal sweep: deficit on `[0, t0)`, then `post_epochs`
/// clean epochs; `t0 = 0` is the shared clean baseline.
pub fn removal_arms(cfg: &ExperimentConfig, data: &Workload) -> Result<Vec<ArmSpec>> {
    let s = &cfg.sweep;
    let base = base_arm(cfg, data, "baseline".into())?;
    let mut arms = vec![arm_with(
        &base,
        "baseline".into(),
        s.post_epochs,
        DeficitSchedule::none(),
        arm_seed(cfg, 0),
    )];
    for kind in &s.deficits {
        for &t0 in s.t0.iter().filter(|&&t| t > 0) {
            let i = arms.len();
            arms.push(arm_with(
                &base,
                format!("removal-{}-t0-{t0}", kind.as_str()),
                t0 + s.post_epochs,
                DeficitSchedule::until(*kind, t0),
                arm_seed(cfg, i),
            ));
        }
        if s.permanent {
            let i = arms.len();
            arms.push(arm_with(
                &base,
                format!("permanent-{}", kind.as_str()),
                s.post_epochs,
                DeficitSchedule::until(*kind, s.post_epochs),
                arm_seed(cfg, i),
            ));
        }
    }
    Ok(arms)
}

fn removal_result(cfg: &ExperimentConfig, arms: &[ArmSpec], results: &[ArmResult]) -> SweepResult {
    let s = &cfg.sweep;
    let row = |kind, t0, permanent, id: &str| {
        let r = find(results, id);
        let spec = arms.iter().find(|a| a.id == id).expect("arm spec");
        RemovalRow {
            deficit: kind,
            t0,
            epochs: spec.train.epochs,
            permanent,
            final_accuracy: r.final_accuracy(),
            final_error: r.final_error(),
            status: r.status.label().into(),
            seed: spec.train.seed,
            arm_id: id.into(),
        }
    };
    let mut rows = Vec::new();
    for kind in &s.deficits {
        for &t0 in &s.t0 {
            let id = if t0 == 0 {
                "baseline".to_string()
            } else {
                format!("removal-{}-t0-{t0}", kind.as_str())
            };
            rows.push(row(*kind, t0, false, &id));
        }
        if s.permanent {
            rows.push(row(
                *kind,
                s.post_epochs,
                true,
                &format!("permanent-{}", kind.as_str()),
            ));
        }
    }
    SweepResult {
        post_epochs: s.post_epochs,
        baseline: "baseline".into(),
        rows,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub onset: usize,
    /// Final-error increase over the baseline, percentage points.
    pub s_k: Option<f64>,
    pub final_error: Option<f64>,
    /// The window extends past the training budget.
    pub truncated: bool,
    pub status: String,
    pub arm_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub deficit: DeficitKind,
    pub k: usize,
    pub total_epochs: usize,
    pub weight_decay: f64,
    pub baseline: String,
    pub baseline_error: Option<f64>,
    pub points: Vec<SensitivityPoint>,
}

impl SensitivityCurve {
    /// Points whose window fits in the budget and whose arm succeeded.
    pub fn defined(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.points
            .iter()
            .filter(|p| !p.truncated)
            .filter_map(|p| p.s_k.map(|s| (p.onset, s)))
    }

    /// Onset of the largest sensitivity; earliest on ties.
    pub fn peak(&self) -> Option<(usize, f64)> {
        self.defined()
            .fold(None, |best: Option<(usize, f64)>, (t, s)| match best {
                Some((_, bs)) if bs >= s => best,
                _ => Some((t, s)),
            })
    }

    /// Onset span over which `S_k` stays at or above half its peak.
    pub fn width(&self) -> Option<usize> {
        let (_, peak) = self.peak()?;
        if !(peak > 0.0) {
            return Some(0);
        }
        let above: Vec<usize> = self
            .defined()
            .filter(|(_, s)| *s >= peak / 2.0)
            .map(|(t, _)| t)
            .collect();
        Some(above.last()? - above.first()?)
    }
}

fn window_arms(
    cfg: &ExperimentConfig,
    data: &Workload,
    weight_decay: f64,
    tag: &str,
) -> Result<(Vec<ArmSpec>, Vec<(usize, String, bool)>)> {
    let s = &cfg.sweep;
    let kind = *s
        .deficits
        .first()
        .ok_or_else(|| Error::Config("sweep.deficits is empty".into()))?;
    let mut base = base_arm(cfg, data, String::new())?;
    base.train.weight_decay = weight_decay;
    let baseline_id = format!("window{tag}-baseline");
    let mut arms = vec![arm_with(
        &base,
        baseline_id.clone(),
        s.total_epochs,
        DeficitSchedule::none(),
        arm_seed(cfg, 0),
    )];
    let mut points = Vec::new();
    for &onset in &s.onsets {
        let truncated = onset + s.window > s.total_epochs;
        if s.window == 0 || onset >= s.total_epochs {
            // the deficit never applies: identical to the baseline
            points.push((onset, baseline_id.clone(), truncated));
            continue;
        }
        let id = format!("window{tag}-{}-onset-{onset}", kind.as_str());
        let i = arms.len();
        arms.push(arm_with(
            &base,
            id.clone(),
            s.total_epochs,
            DeficitSchedule::new(kind, onset, onset + s.window)?,
            arm_seed(cfg, i),
        ));
        points.push((onset, id, truncated));
    }
    Ok((arms, points))
}

fn window_curve(
    cfg: &ExperimentConfig,
    weight_decay: f64,
    points: &[(usize, String, bool)],
    baseline: &str,
    results: &[ArmResult],
) -> SensitivityCurve {
    let base_err = find(results, baseline).final_error();
    SensitivityCurve {
        deficit: cfg.sweep.deficits[0],
        k: cfg.sweep.window,
        total_epochs: cfg.sweep.total_epochs,
        weight_decay,
        baseline: baseline.into(),
        baseline_error: base_err,
        points: points
            .iter()
            .map(|(onset, id, truncated)| {
                let r = find(results, id);
                let err = r.final_error();
                SensitivityPoint {
                    onset: *onset,
                    s_k: match (err, base_err) {
                        (Some(_), Some(_)) if id == baseline => Some(0.0),
                        (Some(e), Some(b)) => Some(100.0 * (e - b)),
                        _ => None,
                    },
                    final_error: err,
                    truncated: *truncated,
                    status: r.status.label().into(),
                    arm_id: id.clone(),
                }
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    pub clean_accuracy: Option<f64>,
    pub deficit_accuracy: Option<f64>,
    /// Clean minus deficit accuracy, percentage points.
    pub drop_points: Option<f64>,
    pub clean_id: String,
    pub deficit_id: String,
}

fn depth_arms(cfg: &ExperimentConfig, data: &Workload) -> Result<(Vec<ArmSpec>, Vec<DepthRow>)> {
    let s = &cfg.sweep;
    let kind = *s
        .deficits
        .first()
        .ok_or_else(|| Error::Config("sweep.deficits is empty".into()))?;
    let epochs = s.depth_t0 + s.post_epochs;
    let mut arms = Vec::new();
    let mut rows = Vec::new();
    for &n in &s.depths {
        let mut base = base_arm(cfg, data, String::new())?;
        base.model = build_vardepth(n, cfg.model.width_scale, data.classes())?
            .with_input_shape(data.input_shape())?;
        base.train.lr0 = s.depth_lr;
        base.train.lr_decay = 1.0;
        let clean_id = format!("depth-{n}-clean");
        let deficit_id = format!("depth-{n}-{}", kind.as_str());
        let i = arms.len();
        arms.push(arm_with(
            &base,
            clean_id.clone(),
            epochs,
            DeficitSchedule::none(),
            arm_seed(cfg, i),
        ));
        arms.push(arm_with(
            &base,
            deficit_id.clone(),
            epochs,
            DeficitSchedule::until(kind, s.depth_t0),
            arm_seed(cfg, i),
        ));
        rows.push(DepthRow {
            depth: n,
            clean_accuracy: None,
            deficit_accuracy: None,
            drop_points: None,
            clean_id,
            deficit_id,
        });
    }
    Ok((arms, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WdCurve {
    pub weight_decay: f64,
    pub baseline_accuracy: Option<f64>,
    pub width: Option<usize>,
    /// Baseline accuracy fell below the configured fraction of the best
    /// baseline: this decay stops training properly.
    pub degraded: bool,
    pub curve: SensitivityCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineRun {
    pub label: String,
    pub deficit: DeficitSchedule,
    pub arm_id: String,
    pub status: String,
    pub reports: Vec<FisherReport>,
    pub grad_stats: Vec<GradStats>,
    pub history: Vec<EpochRecord>,
}

impl TimelineRun {
    pub fn report_at(&self, epoch: usize) -> Option<&FisherReport> {
        self.reports.iter().find(|r| r.epoch == epoch)
    }

    pub fn peak(&self) -> Option<&FisherReport> {
        self.reports
            .iter()
            .fold(None, |best: Option<&FisherReport>, r| match best {
                Some(b) if b.total >= r.total => best,
                _ => Some(r),
            })
    }
}

fn timeline_arms(
    cfg: &ExperimentConfig,
    data: &Workload,
    epochs: usize,
    probe_epochs: &[usize],
    runs: &[(String, DeficitSchedule)],
) -> Result<Vec<ArmSpec>> {
    let t = &cfg.timeline;
    let base = base_arm(cfg, data, String::new())?;
    Ok(runs
        .iter()
        .enumerate()
        .map(|(i, (label, deficit))| {
            let mut arm = arm_with(
                &base,
                format!("timeline-{label}"),
                epochs,
                *deficit,
                arm_seed(cfg, i),
            );
            arm.train.probe_epochs = probe_epochs.to_vec();
            arm.fisher = Some(t.fisher.clone());
            arm.grad_batches = t.grad_batches;
            arm
        })
        .collect())
}

fn timeline_runs(cfg: &ExperimentConfig) -> Vec<(String, DeficitSchedule)> {
    let t = &cfg.timeline;
    let mut runs = Vec::new();
    if t.clean {
        runs.push(("clean".to_string(), DeficitSchedule::none()));
    }
    for &t0 in &t.removal_t0 {
        runs.push((
            format!("{}-until-{t0}", t.deficit.as_str()),
            DeficitSchedule::until(t.deficit, t0),
        ));
    }
    if t.permanent {
        runs.push((
            format!("{}-permanent", t.deficit.as_str()),
            DeficitSchedule::until(t.deficit, t.epochs),
        ));
    }
    runs
}

fn collect_timeline(
    arms: &[ArmSpec],
    runs: &[(String, DeficitSchedule)],
    results: &[ArmResult],
) -> Vec<TimelineRun> {
    runs.iter()
        .zip(arms)
        .map(|((label, deficit), arm)| {
            let r = find(results, &arm.id);
            TimelineRun {
                label: label.clone(),
                deficit: *deficit,
                arm_id: arm.id.clone(),
                status: r.status.label().into(),
                reports: r.fisher.clone(),
                grad_stats: r.grad_stats.clone(),
                history: r.history.clone(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPair {
    pub epoch: usize,
    pub s_k: f64,
    pub trace: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub fit: ExpLinkFit,
    pub s_peak_epoch: usize,
    pub f_peak_epoch: usize,
    /// `|s_peak_epoch - f_peak_epoch|`
    pub alignment: usize,
    pub budget: usize,
    pub pairs: Vec<CorrelationPair>,
}

/// Total trace at `epoch`, linearly interpolated between probes.
pub fn trace_at(reports: &[FisherReport], epoch: usize) -> Option<f64> {
    let mut pts: Vec<(usize, f64)> = reports.iter().map(|r| (r.epoch, r.total)).collect();
    pts.sort_by_key(|p| p.0);
    let first = *pts.first()?;
    let last = *pts.last()?;
    if epoch <= first.0 {
        return Some(first.1);
    }
    if epoch >= last.0 {
        return Some(last.1);
    }
    let hi = pts.iter().position(|p| p.0 >= epoch)?;
    let (e0, f0) = pts[hi - 1];
    let (e1, f1) = pts[hi];
    if e1 == epoch {
        return Some(f1);
    }
    let w = (epoch - e0) as f64 / (e1 - e0) as f64;
    Some(f0 + w * (f1 - f0))
}

/// Fits `F(t) = a exp(c S_k(t)) + b` between a sensitivity curve and the
/// clean run's trace timeline, and measures how far apart their peaks are.
pub fn correlate_sensitivity_fim(
    curve: &SensitivityCurve,
    reports: &[FisherReport],
) -> Result<Correlation> {
    let pairs: Vec<CorrelationPair> = curve
        .defined()
        .filter_map(|(t, s)| {
            trace_at(reports, t).map(|f| CorrelationPair {
                epoch: t,
                s_k: s,
                trace: f,
            })
        })
        .collect();
    if pairs.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 paired epochs, got {}",
            pairs.len()
        )));
    }
    let s: Vec<f64> = pairs.iter().map(|p| p.s_k).collect();
    let f: Vec<f64> = pairs.iter().map(|p| p.trace).collect();
    let fit = fit_exp_link(&s, &f)?;
    let (s_peak_epoch, _) = curve.peak().expect("pairs are defined points");
    let f_peak_epoch = reports
        .iter()
        .filter(|r| r.epoch <= curve.total_epochs)
        .fold(None, |best: Option<&FisherReport>, r| match best {
            Some(b) if b.total >= r.total => best,
            _ => Some(r),
        })
        .map(|r| r.epoch)
        .ok_or_else(|| Error::Degenerate("no Fisher reports".into()))?;
    Ok(Correlation {
        fit,
        s_peak_epoch,
        f_peak_epoch,
        alignment: s_peak_epoch.abs_diff(f_peak_epoch),
        budget: curve.total_epochs,
        pairs,
    })
}

/// First epoch (1-based count of completed epochs) at which test accuracy
/// reaches `fraction` of its final value.
pub fn plateau_epoch(history: &[EpochRecord], fraction: f64) -> Option<usize> {
    let last = history.last()?.test_acc;
    history
        .iter()
        .position(|r| r.test_acc >= fraction * last)
        .map(|i| i + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    SweepRemoval,
    SweepWindow,
    SweepDepth,
    SweepWd,
    FimTimeline,
    Correlate,
    Fit,
    ExportFilters,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Train,
        Command::SweepRemoval,
        Command::SweepWindow,
        Command::SweepDepth,
        Command::SweepWd,
        Command::FimTimeline,
        Command::Correlate,
        Command::Fit,
        Command::ExportFilters,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::SweepRemoval => "sweep-removal",
            Command::SweepWindow => "sweep-window",
            Command::SweepDepth => "sweep-depth",
            Command::SweepWd => "sweep-wd",
            Command::FimTimeline => "fim-timeline",
            Command::Correlate => "correlate",
            Command::Fit => "fit",
            Command::ExportFilters => "export-filters",
        }
    }
}

impl std::str::FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown command {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub kind: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmEntry {
    pub id: String,
    pub hash: String,
    pub seed: u64,
    pub status: ArmStatus,
    pub final_accuracy: Option<f64>,
    pub digest: Option<String>,
    pub history_hash: String,
    pub seconds: f64,
    pub spec: ArmSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub command: Command,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub workers: usize,
    pub arms: Vec<ArmEntry>,
    pub files: Vec<FileEntry>,
    /// Command-specific summary (fits, peaks, flags).
    pub summary: serde_json::Value,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn arm(&self, id: &str) -> Option<&ArmEntry> {
        self.arms.iter().find(|a| a.id == id)
    }
}

/// Re-trains one arm of a manifest and reports whether the weights and the
/// epoch records are bit-identical to the recorded ones.
pub fn rerun_arm(manifest: &Manifest, id: &str) -> Result<(ArmResult, bool)> {
    let entry = manifest
        .arm(id)
        .ok_or_else(|| Error::invalid(format!("no arm {id} in manifest")))?;
    let data = Workload::load(&manifest.config)?;
    let result = run_arm(&entry.spec, &data);
    let same = result.digest == entry.digest && result.history_hash() == entry.history_hash;
    Ok((result, same))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub kind: FitKind,
    pub double_exp: Option<DoubleExpFit>,
    pub exp_link: Option<ExpLinkFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Report {
    Train {
        history: Vec<EpochRecord>,
        fisher: Vec<FisherReport>,
    },
    Removal(SweepResult),
    Window(SensitivityCurve),
    Depth {
        rows: Vec<DepthRow>,
    },
    WeightDecay {
        curves: Vec<WdCurve>,
    },
    Timeline {
        runs: Vec<TimelineRun>,
    },
    Correlate {
        curve: SensitivityCurve,
        clean: TimelineRun,
        correlation: Option<Correlation>,
        error: Option<String>,
    },
    Fit(FitOutput),
    Filters {
        layer: usize,
        width: usize,
        height: usize,
        channels: usize,
        tiles: usize,
        smoothness: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub manifest: Manifest,
    pub report: Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub out: PathBuf,
    pub workers: usize,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, name: &str, kind: &str) -> Result<()> {
        let path = self.path(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let sha256 = Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        self.files.push(FileEntry {
            name: name.into(),
            kind: kind.into(),
            sha256,
        });
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, name: &str, kind: &str, rows: &[T]) -> Result<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        self.record(name, kind)
    }
}

#[derive(Serialize)]
struct HistoryRow<'a> {
    arm_id: &'a str,
    epoch: usize,
    lr: f64,
    train_loss: f64,
    test_acc: f64,
}

fn history_rows<'a>(results: &'a [ArmResult]) -> Vec<HistoryRow<'a>> {
    results
        .iter()
        .flat_map(|r| {
            r.history.iter().map(move |h| HistoryRow {
                arm_id: &r.id,
                epoch: h.epoch,
                lr: h.lr,
                train_loss: h.train_loss,
                test_acc: h.test_acc,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct FisherRow<'a> {
    run: &'a str,
    epoch: usize,
    layer_id: usize,
    label: &'a str,
    params: usize,
    trace: f64,
    total: f64,
    share_of_total: f64,
    per_layer_peak: f64,
    n_x: usize,
    n_y: usize,
    seed: u64,
}

fn fisher_rows<'a>(run: &'a str, reports: &'a [FisherReport]) -> Vec<FisherRow<'a>> {
    let share = normalize_layerwise(reports, Normalization::ShareOfTotal).ok();
    let peak = normalize_layerwise(reports, Normalization::PerLayerPeak).ok();
    let mut rows = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        for (j, l) in r.layers.iter().enumerate() {
            rows.push(FisherRow {
                run,
                epoch: r.epoch,
                layer_id: l.layer_id,
                label: &l.label,
                params: l.params,
                trace: l.trace,
                total: r.total,
                share_of_total: share.as_ref().map_or(f64::NAN, |s| s[i][j]),
                per_layer_peak: peak.as_ref().map_or(f64::NAN, |s| s[i][j]),
                n_x: r.n_x,
                n_y: r.n_y,
                seed: r.seed,
            });
        }
    }
    rows
}

#[derive(Serialize)]
struct CurveRow<'a> {
    weight_decay: f64,
    deficit: DeficitKind,
    k: usize,
    onset: usize,
    s_k: Option<f64>,
    final_error: Option<f64>,
    baseline_error: Option<f64>,
    truncated: bool,
    status: &'a str,
    arm_id: &'a str,
}

fn curve_rows<'a>(curves: &[&'a SensitivityCurve]) -> Vec<CurveRow<'a>> {
    curves
        .iter()
        .flat_map(|c| {
            c.points.iter().map(move |p| CurveRow {
                weight_decay: c.weight_decay,
                deficit: c.deficit,
                k: c.k,
                onset: p.onset,
                s_k: p.s_k,
                final_error: p.final_error,
                baseline_error: c.baseline_error,
                truncated: p.truncated,
                status: &p.status,
                arm_id: &p.arm_id,
            })
        })
        .collect()
}

fn read_columns(path: &Path, x: &str, y: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("{} has no column {name}", path.display())))
    };
    let (xi, yi) = (col(x)?, col(y)?);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<Option<f64>> {
            let v = rec.get(i).unwrap_or("").trim();
            if v.is_empty() {
                return Ok(None);
            }
            v.parse()
                .map(Some)
                .map_err(|_| Error::invalid(format!("bad number {v:?} in {}", path.display())))
        };
        if let (Some(a), Some(b)) = (parse(xi)?, parse(yi)?) {
            xs.push(a);
            ys.push(b);
        }
    }
    Ok((xs, ys))
}

fn arm_entries(arms: &[ArmSpec], results: &[ArmResult]) -> Vec<ArmEntry> {
    arms.iter()
        .zip(results)
        .map(|(a, r)| ArmEntry {
            id: a.id.clone(),
            hash: a.hash(),
            seed: a.train.seed,
            status: r.status.clone(),
            final_accuracy: r.final_accuracy(),
            digest: r.digest.clone(),
            history_hash: r.history_hash(),
            seconds: r.seconds,
            spec: a.clone(),
        })
        .collect()
}

/// Runs one command end to end: trains its arms, writes one CSV per result
/// type and `manifest.json` into `opts.out`.
pub fn run_command(
    command: Command,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    progress: &Progress<'_>,
) -> Result<Outcome> {
    cfg.validate()?;
    let mut out = Outputs::new(&opts.out)?;
    let needs_data = command != Command::Fit;
    let data = if needs_data {
        Some(Workload::load(cfg)?)
    } else {
        None
    };
    let mut arms: Vec<ArmSpec> = Vec::new();
    let mut results: Vec<ArmResult> = Vec::new();
    let (report, summary) = match command {
        Command::Train => {
            let data = data.as_ref().expect("loaded");
            let mut arm = base_arm(cfg, data, "train".into())?;
            arm.train = cfg.train.clone();
            arm.train.checkpoint_dir = cfg.train.checkpoint_dir.clone();
            if !cfg.train.probe_epochs.is_empty() {
                arm.fisher = Some(cfg.timeline.fisher.clone());
                arm.grad_batches = cfg.timeline.grad_batches;
            }
            let (result, model) = execute(&arm, data);
            progress(&result, 1, 1);
            if let Some(model) = &model {
                Checkpoint::from_state(
                    &model.spec,
                    &model.state,
                    arm.train.epochs as u64,
                    arm.train.seed,
                )
                .write(&out.path("final.ckpt"))?;
                out.record("final.ckpt", "checkpoint")?;
            }
            arms.push(arm);
            results.push(result);
            let r = &results[0];
            out.csv("history.csv", "history", &history_rows(&results))?;
            if !r.fisher.is_empty() {
                out.csv("fisher.csv", "fisher", &fisher_rows(&r.id, &r.fisher))?;
            }
            if !r.grad_stats.is_empty() {
                write_grad_stats_csv(&out.path("grad_stats.csv"), &r.grad_stats)?;
                out.record("grad_stats.csv", "grad_stats")?;
            }
            let summary = serde_json::json!({
                "final_accuracy": r.final_accuracy(),
                "status": r.status,
            });
            (
                Report::Train {
                    history: r.history.clone(),
                    fisher: r.fisher.clone(),
                },
                summary,
            )
        }
        Command::SweepRemoval => {
            let data = data.as_ref().expect("loaded");
            arms = removal_arms(cfg, data)?;
            results = run_arms(&arms, data, opts.workers, progress)?;
            let sweep = removal_result(cfg, &arms, &results);
            out.csv("removal.csv", "removal", &sweep.rows)?;
            out.csv("history.csv", "history", &history_rows(&results))?;
            let summary = serde_json::json!({ "baseline_error": sweep.baseline_error() });
            (Report::Removal(sweep), summary)
        }
        Command::SweepWindow => {
            let data = data.as_ref().expect("loaded");
            let (a, points) = window_arms(cfg, data, cfg.train.weight_decay, "")?;
            arms = a;
            results = run_arms(&arms, data, opts.workers, progress)?;
            let curve = window_curve(cfg, cfg.train.weight_decay, &points, &arms[0].id, &results);
            out.csv("sensitivity.csv", "sensitivity", &curve_rows(&[&curve]))?;
            out.csv("history.csv", "history", &history_rows(&results))?;
            let summary = serde_json::json!({ "peak": curve.peak(), "width": curve.width() });
            (Report::Window(curve), summary)
        }
        Command::SweepDepth => {
            let data = data.as_ref().expect("loaded");
            let (a, mut rows) = depth_arms(cfg, data)?;
            arms = a;
            results = run_arms(&arms, data, opts.workers, progress)?;
            for row in &mut rows {
                row.clean_accuracy = find(&results, &row.clean_id).final_accuracy();
                row.deficit_accuracy = find(&results, &row.deficit_id).final_accuracy();
                row.drop_points = match (row.clean_accuracy, row.deficit_accuracy) {
                    (Some(c), Some(d)) => Some(100.0 * (c - d)),
                    _ => None,
                };
            }
            out.csv("depth.csv", "depth", &rows)?;
            out.csv("history.csv", "history", &history_rows(&results))?;
            (
                Report::Depth { rows: rows.clone() },
                serde_json::json!({ "rows": rows.len() }),
            )
        }
        Command::SweepWd => {
            let data = data.as_ref().expect("loaded");
            let mut plans = Vec::new();
            for (i, &wd) in cfg.sweep.weight_decays.iter().enumerate() {
                let (a, points) = window_arms(cfg, data, wd, &format!("-wd{i}"))?;
                plans.push((wd, a[0].id.clone(), points));
                arms.extend(a);
            }
            results = run_arms(&arms, data, opts.workers, progress)?;
            let mut curves: Vec<WdCurve> = plans
                .iter()
                .map(|(wd, base, points)| {
                    let curve = window_curve(cfg, *wd, points, base, &results);
                    WdCurve {
                        weight_decay: *wd,
                        baseline_accuracy: find(&results, base).final_accuracy(),
                        width: curve.width(),
                        degraded: false,
                        curve,
                    }
                })
                .collect();
            let best = curves
                .iter()
                .filter_map(|c| c.baseline_accuracy)
                .fold(0.0, f64::max);
            for c in &mut curves {
                c.degraded = c
                    .baseline_accuracy
                    .is_none_or(|a| a < cfg.sweep.degraded_fraction * best);
            }
            let refs: Vec<&SensitivityCurve> = curves.iter().map(|c| &c.curve).collect();
            out.csv("sensitivity.csv", "sensitivity", &curve_rows(&refs))?;
            #[derive(Serialize)]
            struct WdRow {
                weight_decay: f64,
                baseline_accuracy: Option<f64>,
                width: Option<usize>,
                degraded: bool,
            }
            let wd_rows: Vec<WdRow> = curves
                .iter()
                .map(|c| WdRow {
                    weight_decay: c.weight_decay,
                    baseline_accuracy: c.baseline_accuracy,
                    width: c.width,
                    degraded: c.degraded,
                })
                .collect();
            out.csv("weight_decay.csv", "weight_decay", &wd_rows)?;
            out.csv("history.csv", "history", &history_rows(&results))?;
            (Report::WeightDecay { curves }, serde_json::json!({}))
        }
        Command::FimTimeline => {
            let data = data.as_ref().expect("loaded");
            let runs = timeline_runs(cfg);
            arms = timeline_arms(
                cfg,
                data,
                cfg.timeline.epochs,
                &cfg.timeline.probe_epochs,
                &runs,
            )?;
            results = run_arms(&arms, data, opts.workers, progress)?;
            let timeline = collect_timeline(&arms, &runs, &results);
            let rows: Vec<FisherRow> = timeline
                .iter()
                .flat_map(|t| fisher_rows(&t.label, &t.reports))
                .collect();
            out.csv("fisher.csv", "fisher", &rows)?;
            let gs: Vec<GradStats> = timeline.iter().flat_map(|t| t.grad_stats.clone()).collect();
            if !gs.is_empty() {
                out.csv("grad_stats.csv", "grad_stats", &grad_stat_rows(&timeline))?;
            }
            out.csv("history.csv", "history", &history_rows(&results))?;
            let summary: serde_json::Value = timeline
                .iter()
                .map(|t| {
                    (
                        t.label.clone(),
                        serde_json::json!({
                            "peak_epoch": t.peak().map(|r| r.epoch),
                            "peak_total": t.peak().map(|r| r.total),
                            "final_total": t.reports.last().map(|r| r.total),
                        }),
                    )
                })
                .collect::<serde_json::Map<_, _>>()
                .into();
            (Report::Timeline { runs: timeline }, summary)
        }
        Command::Correlate => {
            let data = data.as_ref().expect("loaded");
            let (warms, points) = window_arms(cfg, data, cfg.train.weight_decay, "")?;
            let mut probes: Vec<usize> = cfg
                .timeline
                .probe_epochs
                .iter()
                .copied()
                .chain(cfg.sweep.onsets.iter().copied())
                .filter(|&e| e <= cfg.sweep.total_epochs)
                .collect();
            probes.sort_unstable();
            probes.dedup();
            // the clean baseline doubles as the Fisher timeline run; probes
            // do not perturb training
            arms = warms;
            arms[0].train.probe_epochs = probes;
            arms[0].fisher = Some(cfg.timeline.fisher.clone());
            arms[0].grad_batches = cfg.timeline.grad_batches;
            let baseline = arms[0].id.clone();
            results = run_arms(&arms, data, opts.workers, progress)?;
            let curve = window_curve(cfg, cfg.train.weight_decay, &points, &baseline, &results);
            let clean_run = [("clean".to_string(), DeficitSchedule::none())];
            let clean = collect_timeline(&arms[..1], &clean_run, &results).remove(0);
            let (correlation, error) = match correlate_sensitivity_fim(&curve, &clean.reports) {
                Ok(c) => (Some(c), None),
                Err(e) => (None, Some(e.to_string())),
            };
            out.csv("sensitivity.csv", "sensitivity", &curve_rows(&[&curve]))?;
            out.csv(
                "fisher.csv",
                "fisher",
                &fisher_rows(&clean.label, &clean.reports),
            )?;
            if let Some(c) = &correlation {
                out.csv("correlation.csv", "correlation", &c.pairs)?;
            }
            out.csv("history.csv", "history", &history_rows(&results))?;
            let summary = serde_json::json!({ "correlation": correlation, "error": error });
            (
                Report::Correlate {
                    curve,
                    clean,
                    correlation,
                    error,
                },
                summary,
            )
        }
        Command::Fit => {
            let f = &cfg.fit;
            let input = f
                .input
                .as_ref()
                .ok_or_else(|| Error::Config("fit.input is required".into()))?;
            let (xs, ys) = read_columns(input, &f.x_column, &f.y_column)?;
            let output = match f.kind {
                FitKind::DoubleExp => {
                    let pts: Vec<(f64, f64)> = xs.into_iter().zip(ys).collect();
                    FitOutput {
                        kind: f.kind,
                        double_exp: Some(fit_double_exp(&pts, &f.grid)?),
                        exp_link: None,
                    }
                }
                FitKind::ExpLink => FitOutput {
                    kind: f.kind,
                    double_exp: None,
                    exp_link: Some(fit_exp_link(&xs, &ys)?),
                },
            };
            #[derive(Serialize)]
            struct ParamRow {
                parameter: &'static str,
                value: f64,
            }
            let mut params = Vec::new();
            if let Some(d) = &output.double_exp {
                for (parameter, value) in [
                    ("tau1", d.tau1),
                    ("tau2", d.tau2),
                    ("k", d.k),
                    ("d", d.d),
                    ("rms", d.rms),
                ] {
                    params.push(ParamRow { parameter, value });
                }
            }
            if let Some(e) = &output.exp_link {
                for (parameter, value) in [("a", e.a), ("b", e.b), ("c", e.c), ("rms", e.rms)] {
                    params.push(ParamRow { parameter, value });
                }
            }
            out.csv("fit.csv", "fit", &params)?;
            let summary = serde_json::to_value(&output)?;
            (Report::Fit(output), summary)
        }
        Command::ExportFilters => {
            let state = match &cfg.filters.checkpoint {
                Some(path) => {
                    let ckpt = Checkpoint::read(path)?;
                    let d = data.as_ref().expect("loaded");
                    ckpt.restore(&cfg.model.build(d.input_shape(), d.classes())?)?
                }
                None => {
                    let data = data.as_ref().expect("loaded");
                    let mut arm = base_arm(cfg, data, "filters".into())?;
                    arm.train = cfg.train.clone();
                    arm.train.probe_epochs.clear();
                    let (result, model) = execute(&arm, data);
                    progress(&result, 1, 1);
                    arms.push(arm);
                    results.push(result.clone());
                    match model {
                        Some(m) => m.state,
                        None => {
                            return Err(Error::invalid(format!(
                                "training for filter export failed: {:?}",
                                result.status
                            )))
                        }
                    }
                }
            };
            let layer = cfg.filters.layer;
            let weights = state.conv_weight(layer)?;
            let ext = if weights.shape()[1] == 3 {
                "ppm"
            } else {
                "pgm"
            };
            let name = format!("filters_layer{layer}.{ext}");
            let grid: FilterGrid = export_filters(&state, layer, &out.path(&name))?;
            out.record(&name, "filters")?;
            let smoothness = smoothness_indices(weights)?;
            #[derive(Serialize)]
            struct SmoothRow {
                layer: usize,
                kernel: usize,
                smoothness: f64,
            }
            let rows: Vec<SmoothRow> = smoothness
                .iter()
                .enumerate()
                .map(|(kernel, &s)| SmoothRow {
                    layer,
                    kernel,
                    smoothness: s,
                })
                .collect();
            out.csv("smoothness.csv", "smoothness", &rows)?;
            if !results.is_empty() {
                out.csv("history.csv", "history", &history_rows(&results))?;
            }
            let mean = smoothness.iter().sum::<f64>() / smoothness.len().max(1) as f64;
            (
                Report::Filters {
                    layer,
                    width: grid.width,
                    height: grid.height,
                    channels: grid.channels,
                    tiles: grid.tiles,
                    smoothness,
                },
                serde_json::json!({ "mean_smoothness": mean }),
            )
        }
    };
    let manifest = Manifest {
        code_version: CODE_VERSION.into(),
        command,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        workers: opts.workers,
        arms: arm_entries(&arms, &results),
        files: out.files.clone(),
        summary,
    };
    manifest.write(&out.path(MANIFEST_FILE))?;
    Ok(Outcome { manifest, report })
}

#[derive(Serialize)]
struct GradStatRow<'a> {
    run: &'a str,
    epoch: usize,
    layer_id: usize,
    label: &'a str,
    mean_norm: f64,
    std_norm: f64,
}

fn grad_stat_rows(timeline: &[TimelineRun]) -> Vec<GradStatRow<'_>> {
    timeline
        .iter()
        .flat_map(|t| {
            t.grad_stats.iter().flat_map(move |g| {
                g.layers.iter().map(move |l| GradStatRow {
                    run: &t.label,
                    epoch: g.epoch,
                    layer_id: l.layer_id,
                    label: &l.label,
                    mean_norm: l.mean_norm,
                    std_norm: l.std_norm,
                })
            })
        })
        .collect()
}

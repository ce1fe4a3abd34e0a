//! Experiment configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::DoubleExpGrid;
use crate::data::{load_cifar10_bin, load_mnist_dir, make_pattern_dataset, LabeledDataset};
use crate::deficits::DeficitKind;
use crate::error::{Error, Result};
use crate::fisher::{FimOptions, VariationalConfig};
use crate::models::{build_allcnn, build_fc, build_reslite, build_vardepth, ModelSpec};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    /// Generated class patterns; no files needed.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// MNIST: directory with the IDX files. CIFAR-10: directory with
    /// `data_batch_*.bin` and `test_batch.bin`.
    pub dir: PathBuf,
    /// Stratified training subset size per class; all samples if unset.
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_shape: [usize; 3],
    pub synthetic_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetKind::Mnist,
            dir: PathBuf::from("data/mnist"),
            train_per_class: None,
            test_per_class: None,
            synthetic_train: 1000,
            synthetic_test: 300,
            synthetic_shape: [1, 8, 8],
            synthetic_classes: 4,
        }
    }
}

impl DataConfig {
    /// Loads `(train, test)`. Subsets are drawn with `seed`.
    pub fn load(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        let (train, test) = match self.dataset {
            DatasetKind::Mnist => (
                load_mnist_dir(&self.dir, true)?,
                load_mnist_dir(&self.dir, false)?,
            ),
            DatasetKind::Cifar10 => {
                let batches: Vec<PathBuf> = (1..=5)
                    .map(|i| self.dir.join(format!("data_batch_{i}.bin")))
                    .collect();
                let refs: Vec<&Path> = batches.iter().map(PathBuf::as_path).collect();
                (
                    load_cifar10_bin(&refs)?,
                    load_cifar10_bin(&[&self.dir.join("test_batch.bin")])?,
                )
            }
            DatasetKind::Synthetic => (
                make_pattern_dataset(
                    self.synthetic_train,
                    0,
                    self.synthetic_shape,
                    self.synthetic_classes,
                    seed,
                )?,
                make_pattern_dataset(
                    self.synthetic_test,
                    self.synthetic_train,
                    self.synthetic_shape,
                    self.synthetic_classes,
                    seed,
                )?,
            ),
        };
        let train = match self.train_per_class {
            Some(k) => train.stratified_subset(k, seed)?,
            None => train,
        };
        let test = match self.test_per_class {
            Some(k) => test.stratified_subset(k, seed)?,
            None => test,
        };
        Ok((train, test))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Fc,
    Allcnn,
    Vardepth,
    Reslite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub hidden: Vec<usize>,
    pub width_scale: f64,
    /// Conv layers for the variable-depth family.
    pub depth: usize,
    pub blocks: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Fc,
            hidden: vec![512, 256, 128],
            width_scale: 0.25,
            depth: 2,
            blocks: vec![1, 1, 1, 1],
        }
    }
}

impl ModelConfig {
    pub fn build(&self, input_shape: [usize; 3], classes: usize) -> Result<ModelSpec> {
        self.build_with_depth(self.depth, input_shape, classes)
    }

    pub fn build_with_depth(
        &self,
        depth: usize,
        input_shape: [usize; 3],
        classes: usize,
    ) -> Result<ModelSpec> {
        match self.arch {
            Arch::Fc => build_fc(&self.hidden, input_shape, classes),
            Arch::Allcnn => build_allcnn(self.width_scale, classes)?.with_input_shape(input_shape),
            Arch::Vardepth => {
                build_vardepth(depth, self.width_scale, classes)?.with_input_shape(input_shape)
            }
            Arch::Reslite => build_reslite(&self.blocks, self.width_scale, classes)?
                .with_input_shape(input_shape),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub deficits: Vec<DeficitKind>,
    /// Removal epochs; each arm trains with the deficit on `[0, t0)` and then
    /// `post_epochs` clean epochs.
    pub t0: Vec<usize>,
    pub post_epochs: usize,
    /// Also run each deficit for the whole `post_epochs` budget.
    pub permanent: bool,
    /// Window length `k` of the sliding-window sweep.
    pub window: usize,
    pub onsets: Vec<usize>,
    /// Total epochs of every sliding-window arm.
    pub total_epochs: usize,
    pub depths: Vec<usize>,
    /// Deficit length for the depth sweep's deficit arms.
    pub depth_t0: usize,
    /// Fixed learning rate of the depth sweep.
    pub depth_lr: f64,
    pub weight_decays: Vec<f64>,
    /// Baseline accuracy below this fraction of the best baseline in a
    /// weight-decay sweep marks the value as one that stops training properly.
    pub degraded_fraction: f64,
    /// Give every arm its own seed instead of the shared base seed.
    pub reseed_arms: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            deficits: vec![DeficitKind::Blur],
            t0: vec![0, 15, 30, 45, 60],
            post_epochs: 60,
            permanent: false,
            window: 15,
            onsets: vec![0, 5, 10, 15, 20, 25, 30, 35, 40, 45],
            total_epochs: 60,
            depths: vec![2, 4, 6],
            depth_t0: 30,
            depth_lr: 0.001,
            weight_decays: vec![0.0, 0.0005, 0.001],
            degraded_fraction: 0.9,
            reseed_arms: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimelineConfig {
    pub epochs: usize,
    pub probe_epochs: Vec<usize>,
    pub deficit: DeficitKind,
    pub clean: bool,
    pub removal_t0: Vec<usize>,
    pub permanent: bool,
    pub fisher: FimOptions,
    /// `(n_batches, batch_size)` for gradient statistics at each probe.
    pub grad_batches: Option<(usize, usize)>,
}

impl Default for TimelineConfig {
    fn default() -> Self {
        TimelineConfig {
            epochs: 60,
            probe_epochs: vec![0, 2, 5, 10, 15, 20, 30, 40, 50, 60],
            deficit: DeficitKind::Blur,
            clean: true,
            removal_t0: vec![15],
            permanent: true,
            fisher: FimOptions {
                n_x: 500,
                n_y: 1,
                seed: 0,
                chunk: 100,
            },
            grad_batches: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    DoubleExp,
    ExpLink,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub kind: FitKind,
    /// CSV with a header row.
    pub input: Option<PathBuf>,
    pub x_column: String,
    pub y_column: String,
    pub grid: DoubleExpGrid,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            kind: FitKind::DoubleExp,
            input: None,
            x_column: "t".into(),
            y_column: "y".into(),
            grid: DoubleExpGrid::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Conv group to export.
    pub layer: usize,
    /// Export from this checkpoint instead of training first.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Base training setup; `train.seed` is the base seed of every arm.
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub timeline: TimelineConfig,
    pub variational: VariationalConfig,
    pub fit: FitConfig,
    pub filters: FilterConfig,
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

impl Default for ExperimentConfig {
    /// Desk-scale MNIST fully connected setup with a fixed learning rate.
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                lr0: 0.005,
                lr_decay: 1.0,
                weight_decay: 0.0005,
                augment: false,
                epochs: 60,
                ..TrainConfig::default()
            },
            sweep: SweepConfig::default(),
            timeline: TimelineConfig::default(),
            variational: VariationalConfig::default(),
            fit: FitConfig::default(),
            filters: FilterConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Keys missing from `text` keep their desk defaults, also inside a
    /// partially given table such as `[train]`.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let user: toml::Table = text.parse().map_err(|e| bad(&e))?;
        let mut merged = toml::Table::try_from(ExperimentConfig::default()).map_err(|e| bad(&e))?;
        merge_tables(&mut merged, user);
        let cfg: ExperimentConfig = merged.try_into().map_err(|e| bad(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file; relative data and fit paths are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    /// Makes relative paths absolute against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.dir);
        if let Some(p) = &mut self.fit.input {
            fix(p);
        }
        if let Some(p) = &mut self.filters.checkpoint {
            fix(p);
        }
        if let Some(p) = &mut self.train.checkpoint_dir {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let s = &self.sweep;
        if s.window > s.total_epochs {
            return Err(Error::Config(format!(
                "window {} exceeds total_epochs {}",
                s.window, s.total_epochs
            )));
        }
        if s.weight_decays.iter().any(|w| *w < 0.0) {
            return Err(Error::Config("weight decays must be non-negative".into()));
        }
        if !(s.depth_lr > 0.0) {
            return Err(Error::Config("depth_lr must be positive".into()));
        }
        if self.timeline.fisher.n_y == 0 || self.timeline.fisher.n_x == 0 {
            return Err(Error::Config("fisher n_x and n_y must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

//! Experiment configuration: a flat TOML table with a fixed key set.
//!
//! Budgets and weights (`epsilon`, `alpha`, `lambda1`, `lambda2`,
//! `eval_eps`) accept either a number or a fraction string such as
//! `"8/255"`, evaluated as `8.0 / 255.0`. Unknown keys are errors.
//! [`ExperimentConfig::to_toml`] writes a fully resolved snapshot that
//! parses back to an identical config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::attack::{AttackConfig, Norm};
use crate::data::{load_cifar10_dir, split_train_val, synthetic_dataset, ImageDataset, SyntheticKind};
use crate::error::{Error, Result};
use crate::eval::{default_eps_grid, EvalOptions};
use crate::model::{ArchConfig, Preset};
use crate::sstask::{SsTask, SsTaskKind};
use crate::train::{LrSchedule, ModeTag, TrainConfig, TrainMode};

pub const DATA_ROOT_ENV: &str = "SSADV_DATA_ROOT";

/// Parse a number or an `a/b` fraction.
pub fn parse_fraction(s: &str) -> Result<f64> {
    let bad = || Error::config(format!("expected a number or a fraction like \"8/255\", got {s:?}"));
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            if b == 0.0 {
                return Err(bad());
            }
            a / b
        }
        None => s.trim().parse().map_err(|_| bad())?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad())
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NumOrText {
    Int(i64),
    Float(f64),
    Text(String),
}

impl NumOrText {
    fn value<E: serde::de::Error>(self) -> std::result::Result<f64, E> {
        match self {
            NumOrText::Int(i) => Ok(i as f64),
            NumOrText::Float(f) => Ok(f),
            NumOrText::Text(s) => parse_fraction(&s).map_err(E::custom),
        }
    }
}

fn fraction<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    NumOrText::deserialize(d)?.value()
}

fn fraction_list<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<f64>>, D::Error> {
    Option::<Vec<NumOrText>>::deserialize(d)?
        .map(|v| v.into_iter().map(NumOrText::value).collect())
        .transpose()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output directory for checkpoints, histories and reports.
    pub out: PathBuf,
    /// Dataset directory; falls back to `$SSADV_DATA_ROOT`, then `data`.
    pub data_root: Option<PathBuf>,
    /// `cifar10`, `saved` (`train.ckpt`/`test.ckpt` dataset containers under
    /// `data_root`), `two-gaussians-images` or `striped-classes`.
    pub dataset: String,
    /// Use only the first N training / test images (0 = all).
    pub train_subset: usize,
    pub test_subset: usize,
    pub val_fraction: f64,
    /// Size of a generated synthetic training set (test set is a fifth).
    pub synthetic_samples: usize,
    pub image_size: usize,

    pub arch: String,
    pub width: f32,

    pub task: String,
    pub jigsaw_grid: usize,
    pub jigsaw_permutations: usize,

    pub mode: String,
    #[serde(deserialize_with = "fraction")]
    pub lambda1: f64,
    #[serde(deserialize_with = "fraction")]
    pub lambda2: f64,
    pub norm: String,
    #[serde(deserialize_with = "fraction")]
    pub epsilon: f64,
    #[serde(deserialize_with = "fraction")]
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    /// Derived from `mode` when absent; only T3 may set it true.
    pub use_ss_loss: Option<bool>,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_gamma: f64,
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub checkpoint_every: usize,
    /// Pretrained checkpoint whose trunk initializes training.
    pub init_from: Option<PathBuf>,

    pub eval_steps: usize,
    pub eval_restarts: usize,
    pub eval_batch_size: usize,
    /// Test budgets; defaults to the norm's standard grid.
    #[serde(deserialize_with = "fraction_list", skip_serializing_if = "Option::is_none")]
    pub eval_eps: Option<Vec<f64>>,
    pub model_id: Option<String>,

    /// Generated kinds, or CIFAR-10-C file stems when `cifar10c_dir` is set.
    pub corruptions: Vec<String>,
    pub severities: Vec<usize>,
    /// CIFAR-10-C directory; `corrupt` evaluates these files instead of
    /// generating corruptions.
    pub cifar10c_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data_root: None,
            dataset: "cifar10".into(),
            train_subset: 0,
            test_subset: 0,
            val_fraction: 0.1,
            synthetic_samples: 2000,
            image_size: 32,
            arch: "resnet-18".into(),
            width: 1.0,
            task: "rotation".into(),
            jigsaw_grid: 2,
            jigsaw_permutations: 24,
            mode: "T0".into(),
            lambda1: 0.0,
            lambda2: 1.0,
            norm: "linf".into(),
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            random_start: true,
            use_ss_loss: None,
            epochs: 100,
            batch_size: 128,
            lr: 0.1,
            lr_gamma: 0.1,
            lr_milestones: vec![40, 80],
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: true,
            checkpoint_every: 10,
            init_from: None,
            eval_steps: 20,
            eval_restarts: 1,
            eval_batch_size: 256,
            eval_eps: None,
            model_id: None,
            cifar10c_dir: None,
            corruptions: crate::data::ALL_CORRUPTIONS.iter().map(|c| c.name().to_string()).collect(),
            severities: vec![1, 2, 3, 4, 5],
        }
    }
}

/// Parse the right-hand side of `--set key=value`: TOML syntax first, then a
/// bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply `key=value` overrides; dotted keys address nested tables.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {o:?} is not of the form key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        let mut t = &mut *table;
        for part in &path[..path.len() - 1] {
            t = t
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("override {key:?}: {part:?} is not a table")))?;
        }
        t.insert(path[path.len() - 1].to_string(), override_value(raw.trim()));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Self::from_table(table)
    }

    /// Load a config file (or the defaults when `path` is `None`) and apply
    /// overrides before validation.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.mode_tag()?;
        self.norm()?;
        self.preset()?;
        SsTaskKind::parse(&self.task)?;
        self.dataset_kind()?;
        if let Some(u) = self.use_ss_loss {
            let tag = self.mode_tag()?;
            if u != (tag == ModeTag::T3) {
                return Err(Error::config(format!(
                    "keys `mode` and `use_ss_loss` contradict: mode = {tag} with use_ss_loss = {u} \
                     (only T3 adds the self-supervised loss to the attack)"
                )));
            }
        }
        if self.mode_tag()? == ModeTag::T0 && self.lambda1 > 0.0 {
            return Err(Error::config(format!(
                "keys `mode` and `lambda1` contradict: mode = T0 has no self-supervised loss but lambda1 = {}",
                self.lambda1
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!("val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        if self.eval_steps == 0 {
            return Err(Error::config("eval_steps must be positive"));
        }
        if self.severities.iter().any(|s| !(1..=5).contains(s)) {
            return Err(Error::config(format!("severities must be in 1..=5, got {:?}", self.severities)));
        }
        // CIFAR-10-C stems are checked against the files at load time
        if self.cifar10c_dir.is_none() {
            for c in &self.corruptions {
                crate::data::Corruption::parse(c)?;
            }
        }
        self.train_config()?.validate()
    }

    pub fn mode_tag(&self) -> Result<ModeTag> {
        ModeTag::parse(&self.mode)
    }

    pub fn norm(&self) -> Result<Norm> {
        Norm::parse(&self.norm)
    }

    pub fn preset(&self) -> Result<Preset> {
        Preset::parse(&self.arch)
    }

    pub fn dataset_kind(&self) -> Result<DatasetKind> {
        DatasetKind::parse(&self.dataset)
    }

    pub fn ss_task(&self) -> Result<SsTask> {
        match SsTaskKind::parse(&self.task)? {
            SsTaskKind::Rotation => Ok(SsTask::rotation()),
            SsTaskKind::Jigsaw => SsTask::jigsaw(self.jigsaw_grid, self.jigsaw_permutations, self.seed),
        }
    }

    pub fn attack(&self) -> Result<AttackConfig> {
        Ok(AttackConfig {
            norm: self.norm()?,
            epsilon: self.epsilon,
            alpha: self.alpha,
            steps: self.steps,
            random_start: self.random_start,
            use_ss_loss: self.use_ss_loss.unwrap_or(self.mode_tag()? == ModeTag::T3),
            lambda2: self.lambda2,
        })
    }

    /// Base configuration for evaluation attacks (supervised loss, K =
    /// `eval_steps`; α is set per budget).
    pub fn eval_attack(&self) -> Result<AttackConfig> {
        Ok(AttackConfig {
            steps: self.eval_steps,
            use_ss_loss: false,
            ..self.attack()?
        })
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            batch_size: self.eval_batch_size,
            seed: self.seed,
            restarts: self.eval_restarts,
        }
    }

    pub fn eval_eps(&self) -> Result<Vec<f64>> {
        Ok(self.eval_eps.clone().unwrap_or_else(|| default_eps_grid(self.norm().unwrap_or(Norm::Linf))))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: LrSchedule {
                initial: self.lr,
                gamma: self.lr_gamma,
                milestones: self.lr_milestones.clone(),
            },
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            mode: TrainMode {
                tag: self.mode_tag()?,
                lambda1: self.lambda1,
                attack: self.attack()?,
            },
            augment: self.augment,
            checkpoint_every: self.checkpoint_every,
            eval_batch_size: self.eval_batch_size,
        })
    }

    pub fn arch_config(&self, input: [usize; 3], classes: usize) -> Result<ArchConfig> {
        let ss_classes = self.ss_task()?.class_count();
        Ok(ArchConfig::new(self.preset()?, input, classes, ss_classes).with_width(self.width))
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn model_id(&self) -> String {
        self.model_id.clone().unwrap_or_else(|| {
            format!("{}-{}-eps{:.4}-l1_{}", self.mode, self.norm, self.epsilon, self.lambda1)
        })
    }

    /// Train/validation/test sets per `dataset`, subsets and `val_fraction`.
    pub fn load_data(&self) -> Result<Splits> {
        let (train, test) = match self.dataset_kind()? {
            DatasetKind::Cifar10 => {
                let root = self.data_root();
                if !root.is_dir() {
                    return Err(Error::io(
                        &root,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
                    ));
                }
                let c = load_cifar10_dir(&root)?;
                (c.train, c.test)
            }
            DatasetKind::Saved => {
                let root = self.data_root();
                (
                    ImageDataset::load(&root.join("train.ckpt"))?,
                    ImageDataset::load(&root.join("test.ckpt"))?,
                )
            }
            DatasetKind::Synthetic(kind) => {
                let input = [3, self.image_size, self.image_size];
                let n = self.synthetic_samples;
                (
                    synthetic_dataset(kind, n, input, self.seed)?,
                    synthetic_dataset(kind, (n / 5).max(10), input, self.seed.wrapping_add(1))?,
                )
            }
        };
        let train = if self.train_subset > 0 { train.take(self.train_subset.min(train.len()))? } else { train };
        let test = if self.test_subset > 0 { test.take(self.test_subset.min(test.len()))? } else { test };
        let (train, val) = if self.val_fraction > 0.0 {
            let (t, v) = split_train_val(&train, self.val_fraction, self.seed)?;
            (t, Some(v))
        } else {
            (train, None)
        };
        Ok(Splits { train, val, test })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Saved,
    Synthetic(SyntheticKind),
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Self::Cifar10),
            "saved" => Ok(Self::Saved),
            other => SyntheticKind::parse(other).map(Self::Synthetic).map_err(|_| {
                Error::config(format!(
                    "unknown dataset {other:?}; expected cifar10, saved, two-gaussians-images or striped-classes"
                ))
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: ImageDataset,
    pub val: Option<ImageDataset>,
    pub test: ImageDataset,
}

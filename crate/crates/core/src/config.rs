//! Run configuration and the published hyperparameter presets.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetDescriptor, DatasetKind};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{ArchitectureSpec, ModelFlags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    DropConditionY,
    DropCls,
    DropCyc,
    DropMap,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::DropConditionY,
        Ablation::DropCls,
        Ablation::DropCyc,
        Ablation::DropMap,
    ];
    pub const TOKENS: [&'static str; 4] = ["y", "cls", "cyc", "map"];

    pub fn token(self) -> &'static str {
        Self::TOKENS[self as usize]
    }

    /// Parses a comma-separated token list such as `cls,map`.
    pub fn parse_list(s: &str) -> Result<BTreeSet<Ablation>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(Ablation::from_str)
            .collect()
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::TOKENS
            .iter()
            .position(|t| *t == s)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation `{s}`; valid tokens: {}",
                    Self::TOKENS.join(", ")
                ))
            })
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

/// Hyperparameters from the published tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_decay_per_epoch: f64,
    pub weights: LossWeights,
}

impl Hyperparameters {
    pub const SHAPES3D: Hyperparameters = Hyperparameters {
        epochs: 50,
        batch_size: 128,
        lr_generator: 1e-3,
        lr_discriminator: 1e-3,
        lr_decay_per_epoch: 0.98,
        weights: LossWeights::SHAPES3D,
    };
    pub const MNIST: Hyperparameters = Hyperparameters {
        epochs: 100,
        batch_size: 256,
        lr_generator: 1e-3,
        lr_discriminator: 1e-3,
        lr_decay_per_epoch: 0.99,
        weights: LossWeights::MNIST,
    };
    pub const ADNI: Hyperparameters = Hyperparameters {
        epochs: 100,
        batch_size: 3,
        lr_generator: 0.01,
        lr_discriminator: 0.01,
        lr_decay_per_epoch: 1.0,
        weights: LossWeights::ADNI,
    };

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_per_epoch {} outside (0, 1]",
                self.lr_decay_per_epoch
            )));
        }
        self.weights.validate()
    }
}

/// Classifier pre-training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TanConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Required accuracy on the gate set before map training may start.
    pub gate: f64,
    /// Training samples held back as the gate set when the dataset has no
    /// validation split.
    #[serde(default = "default_holdout")]
    pub holdout: usize,
    /// Optional cap on optimizer steps per epoch (desk-scale runs).
    #[serde(default)]
    pub max_steps_per_epoch: Option<usize>,
}

fn default_holdout() -> usize {
    5000
}

impl Default for TanConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            gate: 0.99,
            holdout: default_holdout(),
            max_steps_per_epoch: None,
        }
    }
}

/// A complete run description, stored as `config.json` in the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub name: String,
    pub dataset: DatasetDescriptor,
    /// Preset architecture name (`mnist`, `3dshapes`, `adni`) or an inline spec.
    pub architecture: ArchitectureRef,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_decay_per_epoch: f64,
    pub seed: u64,
    #[serde(default)]
    pub ablation: BTreeSet<Ablation>,
    #[serde(default)]
    pub flags: ModelFlags,
    #[serde(default)]
    pub tan: TanConfig,
    /// Directory of a classifier checkpoint to start map training from.
    #[serde(default)]
    pub classifier_checkpoint: Option<PathBuf>,
    /// Optional cap on steps per epoch (desk-scale runs).
    #[serde(default)]
    pub max_steps_per_epoch: Option<usize>,
    /// Write a checkpoint every this many steps (0: only at epoch ends).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Apply `l1`/`l2` to the map norms divided by the pixel count (L1) and
    /// its square root (L2), i.e. per-pixel mean and RMS. With raw sums the
    /// map term outweighs the classification term by orders of magnitude
    /// and the generator collapses to the zero map.
    #[serde(default = "default_true")]
    pub map_weights_per_pixel: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchitectureRef {
    Preset(String),
    Inline(Box<ArchitectureSpec>),
}

impl ArchitectureRef {
    pub fn resolve(&self) -> Result<ArchitectureSpec> {
        match self {
            ArchitectureRef::Preset(n) => ArchitectureSpec::preset(n),
            ArchitectureRef::Inline(s) => Ok((**s).clone()),
        }
    }
}

impl TrainConfig {
    pub fn from_hyperparameters(name: &str, dataset: DatasetDescriptor, arch: &str, hp: Hyperparameters) -> Self {
        Self {
            name: name.into(),
            dataset,
            architecture: ArchitectureRef::Preset(arch.into()),
            weights: hp.weights,
            optimizer: OptimizerConfig::default(),
            epochs: hp.epochs,
            batch_size: hp.batch_size,
            lr_generator: hp.lr_generator,
            lr_discriminator: hp.lr_discriminator,
            lr_decay_per_epoch: hp.lr_decay_per_epoch,
            seed: 0,
            ablation: BTreeSet::new(),
            flags: ModelFlags::default(),
            tan: TanConfig::default(),
            classifier_checkpoint: None,
            max_steps_per_epoch: None,
            checkpoint_every: 0,
            map_weights_per_pixel: true,
        }
    }

    pub fn mnist(root: impl Into<PathBuf>) -> Self {
        Self::from_hyperparameters("mnist", DatasetDescriptor::mnist(root), "mnist", Hyperparameters::MNIST)
    }

    pub fn shapes3d(root: impl Into<PathBuf>) -> Self {
        Self::from_hyperparameters(
            "3dshapes",
            DatasetDescriptor::shapes3d(root),
            "3dshapes",
            Hyperparameters::SHAPES3D,
        )
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        Hyperparameters {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_generator: self.lr_generator,
            lr_discriminator: self.lr_discriminator,
            lr_decay_per_epoch: self.lr_decay_per_epoch,
            weights: self.weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperparameters().validate()?;
        self.dataset.validate()?;
        let arch = self.architecture.resolve()?;
        arch.check()?;
        if arch.num_classes as usize != self.dataset.num_classes {
            return Err(Error::Config(format!(
                "architecture has {} classes, dataset {}",
                arch.num_classes, self.dataset.num_classes
            )));
        }
        let ds = self.dataset.image_shape;
        if arch.input != [ds.channels as i64, ds.height as i64, ds.width as i64] {
            return Err(Error::Config(format!(
                "architecture input {:?} does not match dataset image shape {:?}",
                arch.input,
                ds.as_hwc()
            )));
        }
        if !(self.optimizer.beta1 >= 0.0
            && self.optimizer.beta1 < 1.0
            && self.optimizer.beta2 >= 0.0
            && self.optimizer.beta2 < 1.0)
        {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.tan.gate >= 0.0 && self.tan.gate <= 1.0) || self.tan.max_epochs < 1 || self.tan.batch_size < 1 {
            return Err(Error::Config("invalid classifier settings".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
        let cfg: Self =
            serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Loss weights as applied by the trainer.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.map_weights_per_pixel {
            let n = self.dataset.image_shape.len() as f64;
            w.l1 /= n;
            w.l2 /= n.sqrt();
        }
        w
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablation.contains(&a)
    }

    pub fn is_mnist(&self) -> bool {
        self.dataset.kind == DatasetKind::Mnist
    }
}

/// Root directory for runs: `$BIN_RUNS_DIR` or `./runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os("BIN_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

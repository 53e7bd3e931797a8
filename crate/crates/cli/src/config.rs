//! TOML run configuration for `train`.
//!
//! ```toml
//! data = "data/directional"        # dataset dir or manifest.json
//! out_dir = "runs/pan"             # optional; falls back to $VOXMAMBA_OUT
//! seed = 1
//! epochs = 30
//! batch_size = 2
//!
//! [model]
//! variant = "pan-seg-mamba"
//! widths = [16, 32, 64, 128]
//! crop = [32, 32, 32]
//! classes = 3
//!
//! [optimizer]
//! kind = "radam"
//! lr = 0.0003
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxmamba::train::{OptimizerConfig, OptimizerKind};
use voxmamba::unet::VariantConfig;
use voxmamba::{Error, Result};

pub const DEFAULT_LR: f64 = 3e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    #[serde(default = "default_kind")]
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_kind() -> OptimizerKind {
    OptimizerConfig::default().kind
}
fn default_lr() -> f64 {
    DEFAULT_LR
}
fn default_beta1() -> f64 {
    OptimizerConfig::default().beta1
}
fn default_beta2() -> f64 {
    OptimizerConfig::default().beta2
}
fn default_eps() -> f64 {
    OptimizerConfig::default().eps
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            lr: DEFAULT_LR,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerSettings {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig { kind: self.kind, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub model: VariantConfig,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
}

fn default_batch() -> usize {
    2
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    /// Relative `data` / `out_dir` are resolved against `base`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.data.is_relative() {
            cfg.data = base.join(&cfg.data);
        }
        if let Some(o) = &cfg.out_dir {
            if o.is_relative() {
                cfg.out_dir = Some(base.join(o));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    /// A learning rate of exactly zero is accepted: it is the documented way
    /// to check that a run leaves the weights untouched.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !self.data.exists() {
            return Err(Error::Config(format!("data path {} does not exist", self.data.display())));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({}, {})", o.beta1, o.beta2)));
        }
        if !(o.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", o.eps)));
        }
        Ok(())
    }
}

//! Run configuration: a TOML document with nested sections. Unknown keys are
//! rejected at every level and `schema_version` must match.
//!
//! ```toml
//! schema_version = 1
//! task = "classify"          # or "regress"
//! seed = 7
//!
//! [model]                    # ModelConfig fields
//! h = 32
//! short_windows = [41, 21]
//! head = { kind = "classify", n_classes = 8 }
//!
//! [data]
//! # path = "data/train.bin"  # omit to generate from [data.synthetic]
//! minmax = true
//! mulaw = true
//! mu = 255.0
//! [data.synthetic]
//! n_classes = 8
//!
//! [mask]
//! ratio = 0.15
//! mean_len = 3.0
//!
//! [optimizer]
//! lr = 1e-4
//! pretrain_lr = 1e-4
//! weight_decay = 1e-3
//!
//! [train]
//! batch_size = 16
//! pretrain_epochs = 20
//! finetune_epochs = 50
//! loss = "asymmetric"
//!
//! [noise]
//! additive = [0.05, 0.1, 0.2, 0.4]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, StetError};
use crate::losses::{AsymmetricLossConfig, LossKind};
use crate::model::{HeadKind, ModelConfig};
use crate::signal::synthetic::SyntheticSpec;
use crate::signal::StrideMode;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    Classify,
    Regress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset file (csv or raw-f64). Synthetic data is generated when absent.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Segment recordings into windows of this length. When absent every
    /// recording must already be exactly `model.t` samples long.
    pub window_ms: Option<f64>,
    pub overlap_ms: f64,
    pub stride_mode: StrideMode,
    pub minmax: bool,
    pub mulaw: bool,
    pub mu: f64,
    /// Train:test ratio applied per class.
    pub split: [usize; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: SyntheticSpec::default(),
            window_ms: None,
            overlap_ms: 0.0,
            stride_mode: StrideMode::Overlap,
            minmax: true,
            mulaw: true,
            mu: 255.0,
            split: [5, 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub ratio: f64,
    pub mean_len: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.15,
            mean_len: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Fine-tuning learning rate.
    pub lr: f64,
    /// Learning rate for masked-reconstruction pretraining.
    pub pretrain_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            pretrain_lr: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub loss: LossKind,
    pub asymmetric: AsymmetricLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            pretrain_epochs: 20,
            finetune_epochs: 50,
            loss: LossKind::Asymmetric,
            asymmetric: AsymmetricLossConfig::default(),
        }
    }
}

/// Noise sweep grid. Each list holds the intensities evaluated for one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub additive: Vec<f64>,
    pub multiplicative: Vec<f64>,
    pub signal_loss: Vec<f64>,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            additive: vec![0.05, 0.1, 0.2, 0.4],
            multiplicative: vec![0.05, 0.1, 0.2, 0.4],
            signal_loss: vec![0.1, 0.2, 0.4],
            seed: 99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub task: Task,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub mask: MaskConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub noise: NoiseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            task: Task::Classify,
            seed: 7,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            mask: MaskConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> StetError {
    StetError::Config(e.to_string())
}

/// Parses a `--set` value as a TOML literal, falling back to a bare string.
fn parse_literal(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML document, creating tables as needed.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| StetError::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(StetError::Config(format!("bad override key `{key}`")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| StetError::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_literal(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides, then validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| StetError::io(p, e))?,
            None => format!("schema_version = {SCHEMA_VERSION}\n"),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("configuration is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(StetError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        match (self.task, self.model.head) {
            (Task::Classify, HeadKind::Classify { .. }) | (Task::Regress, HeadKind::Regress { .. }) => {}
            _ => return Err(StetError::Config("task does not match model.head kind".into())),
        }
        if self.train.batch_size == 0 {
            return Err(StetError::Config("batch_size must be positive".into()));
        }
        if self.data.split.contains(&0) {
            return Err(StetError::Config("both split parts must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.pretrain_lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
        {
            return Err(StetError::Config("optimizer parameters out of range".into()));
        }
        crate::masking::stop_probabilities(self.mask.mean_len, self.mask.ratio)
            .map_err(|e| StetError::Config(e.to_string()))?;
        self.train.asymmetric.validate().map_err(|e| StetError::Config(e.to_string()))?;
        Ok(())
    }
}

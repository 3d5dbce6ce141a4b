//! Run configuration file: one JSON document with `data`, `model`, `train`,
//! and `output` sections. Unknown keys are rejected; every default equals
//! the canonical experimental protocol.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use trackcast::datahub::{ColumnMap, DatasetConfig, SourceFormat};
use trackcast::model::ModelConfig;
use trackcast::trainer::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Environment variable consulted for the default output directory.
pub const OUT_DIR_ENV: &str = "TRACKCAST_OUT";

fn default_schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile {
            schema_version: CONFIG_SCHEMA_VERSION,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory (prepared) or input file, depending on command.
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default = "default_format")]
    pub source_format: SourceFormat,
    #[serde(default = "default_rate")]
    pub native_rate_hz: u32,
    #[serde(default = "default_rate")]
    pub target_rate_hz: u32,
    #[serde(default = "default_t_oh")]
    pub t_oh: usize,
    #[serde(default = "default_t_ph")]
    pub t_ph: usize,
    /// Steps between window starts; defaults to the prediction horizon.
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub ngsim_columns: Option<ColumnMap>,
    #[serde(default)]
    pub chd_columns: Option<ColumnMap>,
}

fn default_format() -> SourceFormat {
    SourceFormat::Canonical
}
fn default_rate() -> u32 {
    5
}
fn default_t_oh() -> usize {
    15
}
fn default_t_ph() -> usize {
    25
}
fn default_split() -> f64 {
    0.8
}
fn default_seed() -> u64 {
    42
}

impl Default for DataSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl DataSection {
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            source_format: self.source_format,
            native_rate_hz: self.native_rate_hz,
            target_rate_hz: self.target_rate_hz,
            t_oh: self.t_oh,
            t_ph: self.t_ph,
            stride: self.stride.unwrap_or(self.t_ph),
            split_fraction: self.split_fraction,
            seed: self.seed,
        }
    }

    pub fn columns_for(&self, format: SourceFormat) -> Option<&ColumnMap> {
        match format {
            SourceFormat::Ngsim => self.ngsim_columns.as_ref(),
            SourceFormat::Chd => self.chd_columns.as_ref(),
            SourceFormat::Canonical => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ffn")]
    pub ffn: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_d_model() -> usize {
    20
}
fn default_layers() -> usize {
    8
}
fn default_heads() -> usize {
    4
}
fn default_ffn() -> usize {
    256
}
fn default_dropout() -> f64 {
    0.2
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_epochs() -> usize {
    80
}
fn default_lr() -> f64 {
    0.01
}
fn default_weight_decay() -> f64 {
    0.0005
}
fn default_batch() -> usize {
    16
}
fn default_eval_every() -> usize {
    10
}

impl Default for TrainSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<String>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("read config {}: {e}", path.display()))?;
        let cfg: RunConfigFile = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("parse config {}: {e}", path.display()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            anyhow::bail!(
                "config schema {} unsupported (want {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            );
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            t_oh: self.data.t_oh,
            t_ph: self.data.t_ph,
            d_model: self.model.d_model,
            n_layers: self.model.layers,
            n_heads: self.model.heads,
            ffn_width: self.model.ffn,
            dropout: self.model.dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
            eval_every: self.train.eval_every,
        }
    }

    /// Output directory precedence: explicit flag, config, environment, cwd.
    pub fn resolve_out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(dir) = &self.output.dir {
            return PathBuf::from(dir);
        }
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        PathBuf::from("runs")
    }
}

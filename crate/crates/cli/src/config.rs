use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cemb_core::data::{EmptyMaskPolicy, SyntheticSpec};
use cemb_core::model::ModelConfig;
use cemb_core::train::TrainConfig;
use cemb_core::Error;
use serde::{Deserialize, Serialize};

/// Where samples come from: a dataset directory or an in-memory generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::heterogeneous(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StageSel {
    Pretrain,
    Finetune,
    #[default]
    Both,
}

fn default_ratio() -> f64 {
    0.8
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Seeds of the conditioning comparison.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_ratio")]
    pub split_ratio: f64,
    #[serde(default)]
    pub stage: StageSel,
    /// Fine-tune with the condition block (false trains the plain decoder).
    #[serde(default = "yes")]
    pub conditioned: bool,
    #[serde(default)]
    pub empty_mask: EmptyMaskPolicy,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: default_seeds(),
            data: DataSource::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split_ratio: default_ratio(),
            stage: StageSel::Both,
            conditioned: true,
            empty_mask: EmptyMaskPolicy::Exclude,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> cemb_core::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.m != self.model.subgroups {
                return Err(Error::Config(format!(
                    "model.subgroups is {} but the synthetic spec has m = {}",
                    self.model.subgroups, spec.m
                )));
            }
        }
        Ok(())
    }
}

/// Strict JSON parse: unknown keys and type errors are reported with the
/// file name.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid configuration {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

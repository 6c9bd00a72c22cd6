//! Run configuration with a default for every field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{AttentionMode, SamplerConfig};
use crate::masks::LayerSchedule;
use crate::model::ModelConfig;
use crate::numerics::AdamConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub steps: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch: 16,
            steps: 5000,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Also update the token embedding table.
    pub train_embeddings: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            alpha: 32.0,
            train_embeddings: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub steps: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { steps: 16 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerSettings,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    pub synth: SynthConfig,
    /// `default`, `all-dis`, `all-har`, `unmasked`, or three regimes like `har-dis-har`.
    pub schedule: String,
    pub data: DataPaths,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            sampler: SamplerSettings::default(),
            train: TrainConfig::default(),
            lora: LoraConfig::default(),
            synth: SynthConfig::default(),
            schedule: "default".into(),
            data: DataPaths::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("config line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        if self.train.batch == 0 {
            return Err(Error::Format("train.batch must be at least 1".into()));
        }
        if self.sampler.steps == 0 {
            return Err(Error::Format("sampler.steps must be at least 1".into()));
        }
        if self.lora.rank == 0 {
            return Err(Error::Format("lora.rank must be at least 1".into()));
        }
        parse_attention(&self.schedule, &self.model)?;
        Ok(())
    }

    pub fn attention(&self) -> Result<AttentionMode> {
        parse_attention(&self.schedule, &self.model)
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            steps: self.sampler.steps,
            attention: self.attention()?,
        })
    }
}

/// Resolves a schedule name against the model's layer grouping.
pub fn parse_attention(spec: &str, model: &ModelConfig) -> Result<AttentionMode> {
    if spec == "unmasked" {
        return Ok(AttentionMode::Unmasked);
    }
    LayerSchedule::parse(spec, model.num_layers, model.early_count, model.late_count).map(AttentionMode::IdAttn)
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::dialogue::SyntheticSpec;
use crate::env::EnvConfig;
use crate::ppo::PpoConfig;
use crate::reward::RewardConfig;

/// Where conversations and passages come from. With no dataset path the
/// synthetic generator is used.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub checkpoint_interval: usize,
    /// Window length for the reward-collapse rule.
    pub collapse_window: usize,
    /// Final-window mean below this fraction of the best window counts as collapse.
    pub collapse_ratio: f64,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 500,
            checkpoint_interval: 50,
            collapse_window: 50,
            collapse_ratio: 0.5,
            seed: 7,
            output_dir: None,
        }
    }
}

/// LLM-scale settings recorded for reference. The macro-action trainer
/// does not read them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FullScaleConfig {
    pub base_model: String,
    pub retriever: String,
    pub train_batch_size: usize,
    pub ppo_micro_batch_size: usize,
    pub max_prompt_tokens: usize,
    pub actor_learning_rate: f64,
    pub top_k: usize,
    pub max_searches: usize,
    pub total_steps: usize,
    pub checkpoint_interval: usize,
}

impl Default for FullScaleConfig {
    fn default() -> Self {
        Self {
            base_model: "Qwen2.5-3B-Instruct".into(),
            retriever: "intfloat/e5-base-v2".into(),
            train_batch_size: 512,
            ppo_micro_batch_size: 64,
            max_prompt_tokens: 3500,
            actor_learning_rate: 1e-6,
            top_k: 3,
            max_searches: 2,
            total_steps: 500,
            checkpoint_interval: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub env: EnvConfig,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub train: TrainConfig,
    pub full_scale: FullScaleConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.env.validate().map_err(TrainError::Config)?;
        self.reward.validate().map_err(TrainError::Config)?;
        self.ppo.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.data
            .synthetic
            .validate()
            .map_err(|e| TrainError::Config(format!("data.synthetic: {e}")))?;
        let t = &self.train;
        if t.checkpoint_interval == 0 {
            return Err(TrainError::Config(
                "train.checkpoint_interval must be at least 1".into(),
            ));
        }
        if t.collapse_window == 0 {
            return Err(TrainError::Config("train.collapse_window must be at least 1".into()));
        }
        if !t.collapse_window.is_multiple_of(t.checkpoint_interval) {
            return Err(TrainError::Config(
                "train.collapse_window must be a multiple of train.checkpoint_interval".into(),
            ));
        }
        if !(0.0..=1.0).contains(&t.collapse_ratio) {
            return Err(TrainError::Config("train.collapse_ratio must lie in [0, 1]".into()));
        }
        if self.data.dataset.is_some() != self.data.corpus.is_some() {
            return Err(TrainError::Config(
                "data.dataset and data.corpus must be given together".into(),
            ));
        }
        for (name, p) in [
            ("data.dataset", &self.data.dataset),
            ("data.corpus", &self.data.corpus),
            ("data.qrels", &self.data.qrels),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(TrainError::Config(format!("{name}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

//! Two-stage optimization: encoder pretraining behind a frozen head, then
//! joint fine-tuning with the bidirectional prototypical loss.

mod checkpoint;
mod evaluate;
mod optim;
mod schedule;
mod stages;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, AttentionVariant};
use crate::data::EpisodeSpec;
use crate::encoder::EncoderConfig;
use crate::error::{ensure, Result};
use crate::losses::{LossBreakdown, LossConfig};
use crate::protohead::ProtoHeadConfig;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use evaluate::{evaluate, EpisodeEval, EvalConfig, EvalResult};
pub use optim::{clip_global_norm, global_norm, AdamW, AdamWConfig, GroupGrads};
pub use schedule::{cosine_lr, schedule_step};
pub use stages::{episode_gradients, finetune_stage, pretrain_stage, StepGradients, Trainer};

/// RNG stream ids derived from the run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const PRETRAIN: u64 = 1;
    pub const FINETUNE: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const HEAD_INIT: u64 = 4;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Pretrain,
    Finetune,
}

/// Architecture of encoder and head.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention_variant: AttentionVariant,
    pub attention: AttentionConfig,
    pub head: ProtoHeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.attention.validate()?;
        self.head.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub episodes: usize,
    /// Episodes whose gradients are averaged into one update.
    pub batch_episodes: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub schedule_t: usize,
    /// Episodes per scheduler step.
    pub schedule_stride: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub episode_spec: EpisodeSpec,
    pub loss: LossConfig,
    pub attention: AttentionVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            episodes: 1000,
            batch_episodes: 1,
            lr_init: 1e-3,
            lr_min: 1e-6,
            schedule_t: 50,
            schedule_stride: 20,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            seed: 42,
            episode_spec: EpisodeSpec::new(8, 5, 1),
            loss: LossConfig::default(),
            attention: AttentionVariant::None,
        }
    }
}

impl TrainConfig {
    /// Stage 1 defaults: 8 defect classes plus background per episode.
    pub fn pretrain() -> Self {
        TrainConfig::default()
    }

    /// Stage 2 defaults: 2-way 5-shot.
    pub fn finetune() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            episode_spec: EpisodeSpec::new(2, 5, 1),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_episodes >= 1, "batch_episodes must be >= 1");
        ensure!(self.clip_norm > 0.0, "clip_norm must be positive");
        ensure!(
            self.lr_min < self.lr_init,
            "lr_min ({}) must be below lr_init ({})",
            self.lr_min,
            self.lr_init
        );
        ensure!(self.lr_min >= 0.0, "lr_min must be >= 0");
        ensure!(self.schedule_stride >= 1, "schedule_stride must be >= 1");
        ensure!(self.weight_decay >= 0.0, "weight_decay must be >= 0");
        self.loss.validate()
    }

    pub fn lr_at(&self, episode: usize) -> f64 {
        cosine_lr(
            schedule_step(episode, self.schedule_stride),
            self.lr_init,
            self.lr_min,
            self.schedule_t,
        )
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One JSON-lines training log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub stage: Stage,
    pub episode: usize,
    /// Dataset class ids of the episode, in episode order.
    pub classes: Vec<usize>,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Hex SHA-256 of the JSON serialization.
pub fn config_digest<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

//! Parameter-updating stages: pretraining, supervised fine-tuning, reward
//! modeling and KL-regularized reinforcement learning with a curriculum.

mod curriculum;
mod metrics;
mod rl;
mod rm;
mod sft;

pub use curriculum::{run_curriculum, CurriculumArtifacts, CurriculumPlan, PitRound, RoundInit, RoundOutcome};
pub use metrics::{read_metrics_csv, write_metrics_csv, MetricsRow};
pub use rl::{
    rl_pit_round0, rl_pit_round1, rl_pit_round2, rl_policy, sequence_kl, Baseline, ReferenceRecord, RefSource, RewardSource,
    RlConfig, RlOutcome, Selection,
};
pub use rm::{train_rm, RmOutcome};
pub use sft::{pretrain_lm, sft_pit, sft_policy, SftOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Held-out evaluation cadence in optimizer steps (reward models only).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay to zero over the run.
    Linear,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear => base * (1.0 - step as f64 / total.max(1) as f64),
        }
    }
}

fn default_eval_every() -> usize {
    25
}

fn default_log_every() -> usize {
    1
}

impl TrainConfig {
    /// Supervised fine-tuning: one pass over the fold.
    pub fn sft() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            epochs: 1,
            batch_size: 8,
            eval_every: default_eval_every(),
            log_every: default_log_every(),
            schedule: LrSchedule::Constant,
            seed: 0,
        }
    }

    pub fn rm() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 16,
            eval_every: default_eval_every(),
            log_every: default_log_every(),
            schedule: LrSchedule::Constant,
            seed: 0,
        }
    }

    pub fn pretrain() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            epochs: 1,
            batch_size: 16,
            eval_every: default_eval_every(),
            log_every: default_log_every(),
            schedule: LrSchedule::Constant,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "learning rate must be >= 0, epochs and batch size >= 1".into(),
            ));
        }
        if self.eval_every == 0 || self.log_every == 0 {
            return Err(Error::Config("eval/log cadence must be >= 1".into()));
        }
        Ok(())
    }
}

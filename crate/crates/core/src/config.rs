//! TOML experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::eval::EloConfig;
use crate::improve::ImproveConfig;
use crate::model::ArchConfig;
use crate::reward::{RmObjective, TieBand};
use crate::train::{RlConfig, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Root seed; every stage seed is derived from it.
    pub seed: u64,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub model: ArchConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default = "TrainConfig::sft")]
    pub sft_policy: TrainConfig,
    #[serde(default = "TrainConfig::sft")]
    pub sft_pit: TrainConfig,
    #[serde(default = "RmStageConfig::policy")]
    pub rm_policy: RmStageConfig,
    #[serde(default = "RmStageConfig::gap")]
    pub rm_gap: RmStageConfig,
    #[serde(default)]
    pub rl_policy: RlConfig,
    #[serde(default)]
    pub rl_pit: RlConfig,
    #[serde(default)]
    pub curriculum: CurriculumConfig,
    #[serde(default)]
    pub improve: ImproveConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub enabled: bool,
    /// Sequences in the unlabeled corpus.
    pub corpus_size: usize,
    #[serde(default = "TrainConfig::pretrain")]
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            enabled: false,
            corpus_size: 0,
            train: TrainConfig::pretrain(),
        }
    }
}

/// Where a reward model's backbone starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmInit {
    Random,
    /// The matching SFT generator: policy for `R_P`, improver for `R_PIT`.
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmStageConfig {
    pub init: RmInit,
    pub objective: RmObjective,
    pub train: TrainConfig,
}

impl RmStageConfig {
    pub fn policy() -> Self {
        RmStageConfig {
            init: RmInit::Sft,
            objective: RmObjective::Pairwise,
            train: TrainConfig::rm(),
        }
    }

    pub fn gap() -> Self {
        RmStageConfig {
            init: RmInit::Sft,
            objective: RmObjective::GapChain,
            train: TrainConfig::rm(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Adds round 2 (references improved by the round-1 model).
    pub round2: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tie_band: TieBand,
    pub elo: EloConfig,
    pub temperatures: Vec<f64>,
    pub best_of_n: usize,
    pub shuffles: usize,
    /// Prompts scored by the ELO round robin.
    pub elo_prompts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tie_band: TieBand::default(),
            elo: EloConfig::default(),
            temperatures: vec![0.4, 0.6, 0.8, 1.0],
            best_of_n: 4,
            shuffles: 5,
            elo_prompts: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.env.validate()?;
        self.model.validate()?;
        let vocab = self.env.vocab()?;
        if self.model.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match the environment's {}",
                self.model.vocab_size,
                vocab.size()
            )));
        }
        if self.pretrain.enabled {
            if self.pretrain.corpus_size == 0 {
                return Err(Error::Config("pretraining needs corpus_size >= 1".into()));
            }
            self.pretrain.train.validate()?;
        }
        for t in [&self.sft_policy, &self.sft_pit, &self.rm_policy.train, &self.rm_gap.train] {
            t.validate()?;
        }
        if self.rm_policy.objective != RmObjective::Pairwise {
            return Err(Error::Config("rm_policy trains with the pairwise objective".into()));
        }
        if self.rm_gap.objective == RmObjective::Pairwise {
            return Err(Error::Config("rm_gap needs a gap objective".into()));
        }
        self.rl_policy.validate()?;
        self.rl_pit.validate()?;
        self.improve.validate()?;
        self.eval.elo.validate()?;
        let band = self.eval.tie_band;
        if !(0.0 < band.lo && band.lo <= 0.5 && 0.5 <= band.hi && band.hi < 1.0) {
            return Err(Error::Config("tie band must satisfy 0 < lo <= 0.5 <= hi < 1".into()));
        }
        if self.eval.temperatures.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Config("sweep temperatures must be >= 0".into()));
        }
        if self.eval.best_of_n == 0 || self.eval.shuffles < 2 || self.eval.elo_prompts == 0 {
            return Err(Error::Config("best_of_n and elo_prompts must be >= 1, shuffles >= 2".into()));
        }
        if self.env.eval_prompts == 0 {
            return Err(Error::Config("eval_prompts must be >= 1".into()));
        }
        let longest = 3 + self.env.max_required + 2 * self.env.response_cap + 2;
        if longest > self.model.context_len {
            return Err(Error::Config(format!(
                "context_len {} cannot hold the gap-reward layout ({longest} tokens)",
                self.model.context_len
            )));
        }
        let gen = [self.rl_policy.max_len, self.rl_pit.max_len, self.improve.max_len];
        if gen.iter().any(|&m| m > self.env.response_cap) {
            return Err(Error::Config("generation max_len may not exceed env.response_cap".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "schema_version = 1\nseed = 7\n";

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.env, EnvConfig::default());
        assert_eq!(cfg.eval.temperatures, vec![0.4, 0.6, 0.8, 1.0]);
        assert_eq!(cfg.improve.iterations, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("schema_version = 1\nseed = 1\nbogus = 2\n"), Err(Error::Config(_))));
        let nested = "schema_version = 1\nseed = 1\n[rl_pit]\nbetta = 0.1\n";
        assert!(matches!(ExperimentConfig::from_toml(nested), Err(Error::Config(_))));
    }

    #[test]
    fn schema_version_is_checked() {
        assert!(ExperimentConfig::from_toml("schema_version = 2\nseed = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("seed = 1\n").is_err());
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash().unwrap(), again.hash().unwrap());
        let other = ExperimentConfig { seed: 8, ..cfg.clone() };
        assert_ne!(cfg.hash().unwrap(), other.hash().unwrap());
    }

    #[test]
    fn inconsistent_sections_fail_validation() {
        let bad_vocab = "schema_version = 1\nseed = 1\n[env]\ncontent_tokens = 20\n";
        assert!(ExperimentConfig::from_toml(bad_vocab).is_err());
        let bad_band = "schema_version = 1\nseed = 1\n[eval.tie_band]\nlo = 0.6\nhi = 0.7\n";
        assert!(ExperimentConfig::from_toml(bad_band).is_err());
        let one_shuffle = "schema_version = 1\nseed = 1\n[eval]\nshuffles = 1\n";
        assert!(ExperimentConfig::from_toml(one_shuffle).is_err());
    }
}

//! Binary checkpoint format shared by every model kind.
//!
//! ```text
//! "PITC" | version: u8 | meta_len: u32 LE | meta: UTF-8 JSON | params: f32 LE ...
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, SeqModel};
use crate::reward::{RewardKind, RewardModel};

pub const MAGIC: &[u8; 4] = b"PITC";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Policy,
    Pit,
    RewardPolicy,
    RewardGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Pretrain,
    SftPolicy,
    SftPit,
    RmPolicy,
    RmGap,
    RlPolicy,
    RlPitR0,
    RlPitR1,
    RlPitR2,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Pretrain => "pretrain",
            Stage::SftPolicy => "sft_policy",
            Stage::SftPit => "sft_pit",
            Stage::RmPolicy => "rm_policy",
            Stage::RmGap => "rm_gap",
            Stage::RlPolicy => "rl_policy",
            Stage::RlPitR0 => "rl_pit_r0",
            Stage::RlPitR1 => "rl_pit_r1",
            Stage::RlPitR2 => "rl_pit_r2",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_kind: ModelKind,
    pub arch_config: ArchConfig,
    pub vocab_hash: String,
    pub training_stage: Stage,
    /// Earlier stages this checkpoint descends from, oldest first.
    pub ancestry: Vec<Stage>,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_seq_model(m: &SeqModel, kind: ModelKind, stage: Stage, ancestry: Vec<Stage>) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model_kind: kind,
                arch_config: m.arch.clone(),
                vocab_hash: m.vocab_hash.clone(),
                training_stage: stage,
                ancestry,
                param_count: m.params.len(),
            },
            params: m.params.clone(),
        }
    }

    pub fn from_reward_model(m: &RewardModel, stage: Stage, ancestry: Vec<Stage>) -> Self {
        let kind = match m.kind {
            RewardKind::Policy => ModelKind::RewardPolicy,
            RewardKind::Gap => ModelKind::RewardGap,
        };
        Checkpoint {
            meta: CheckpointMeta {
                model_kind: kind,
                arch_config: m.arch.clone(),
                vocab_hash: m.vocab_hash.clone(),
                training_stage: stage,
                ancestry,
                param_count: m.params.len(),
            },
            params: m.params.clone(),
        }
    }

    pub fn to_reward_model(&self) -> Result<RewardModel> {
        let kind = match self.meta.model_kind {
            ModelKind::RewardPolicy => RewardKind::Policy,
            ModelKind::RewardGap => RewardKind::Gap,
            k => return Err(Error::Checkpoint(format!("{k:?} checkpoint is not a reward model"))),
        };
        RewardModel::from_params(
            kind,
            self.meta.arch_config.clone(),
            self.meta.vocab_hash.clone(),
            self.params.clone(),
        )
    }

    /// Full lineage including this checkpoint's own stage.
    pub fn lineage(&self) -> Vec<Stage> {
        let mut l = self.meta.ancestry.clone();
        l.push(self.meta.training_stage);
        l
    }

    pub fn to_seq_model(&self) -> Result<SeqModel> {
        if !matches!(self.meta.model_kind, ModelKind::Policy | ModelKind::Pit) {
            return Err(Error::Checkpoint(format!(
                "{:?} checkpoint is not a generator",
                self.meta.model_kind
            )));
        }
        SeqModel::from_params(
            self.meta.arch_config.clone(),
            self.meta.vocab_hash.clone(),
            self.params.clone(),
        )
    }

    pub fn expect_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.meta.vocab_hash != vocab_hash {
            return Err(Error::VocabMismatch {
                expected: vocab_hash.to_string(),
                found: self.meta.vocab_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(9 + meta.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for &p in &self.params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", bytes[4])));
        }
        let meta_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body_at = 9 + meta_len;
        if bytes.len() < body_at {
            return Err(Error::Checkpoint("truncated metadata".into()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[9..body_at])?;
        let body = &bytes[body_at..];
        if body.len() != 4 * meta.param_count {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, body holds {} bytes",
                meta.param_count,
                body.len()
            )));
        }
        let params = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Rounds every parameter through `f32` so in-memory models match their
/// on-disk form.
pub fn round_to_stored(params: &mut [f64]) {
    for p in params {
        *p = *p as f32 as f64;
    }
}

/// Writes via a temporary file in the destination directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

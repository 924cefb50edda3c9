use serde::{Deserialize, Serialize};

use super::rl::{rl_pit_round0, rl_pit_round1, rl_pit_round2, RewardSource, RlConfig, RlOutcome};
use crate::checkpoint::{Checkpoint, ModelKind, Stage};
use crate::env::PreferenceExample;
use crate::error::{Error, Result};
use crate::model::SeqModel;

/// Starting point of an improver RL round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundInit {
    /// The previous round's selected checkpoint (the SFT improver for round 0).
    Previous,
    /// The SFT improver regardless of earlier rounds.
    SftPit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitRound {
    pub round: u8,
    pub init: RoundInit,
    pub rl: RlConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub rounds: Vec<PitRound>,
    /// Permits plans that skip the round-0 dependency.
    #[serde(default)]
    pub ablation: bool,
}

impl CurriculumPlan {
    /// Rounds 0 then 1, every round with the same RL settings.
    pub fn standard(rl: &RlConfig) -> Self {
        CurriculumPlan {
            rounds: vec![Self::round(0, RoundInit::Previous, rl), Self::round(1, RoundInit::Previous, rl)],
            ablation: false,
        }
    }

    pub fn with_round2(rl: &RlConfig) -> Self {
        let mut plan = Self::standard(rl);
        plan.rounds.push(Self::round(2, RoundInit::Previous, rl));
        plan
    }

    pub fn first_rl_only(rl: &RlConfig) -> Self {
        CurriculumPlan {
            rounds: vec![Self::round(0, RoundInit::Previous, rl)],
            ablation: true,
        }
    }

    /// Round 1 started from the SFT improver.
    pub fn second_rl_only(rl: &RlConfig) -> Self {
        CurriculumPlan {
            rounds: vec![Self::round(1, RoundInit::SftPit, rl)],
            ablation: true,
        }
    }

    fn round(round: u8, init: RoundInit, rl: &RlConfig) -> PitRound {
        PitRound {
            round,
            init,
            rl: RlConfig { round, ..rl.clone() },
        }
    }

    pub fn round_ids(&self) -> Vec<u8> {
        self.rounds.iter().map(|r| r.round).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds.is_empty() {
            return Err(Error::Plan("curriculum has no rounds".into()));
        }
        for r in &self.rounds {
            r.rl.validate()?;
            if r.rl.round != r.round {
                return Err(Error::Plan(format!(
                    "round {} carries an RL config for round {}",
                    r.round, r.rl.round
                )));
            }
        }
        if self.rounds.windows(2).any(|w| w[0].round >= w[1].round) {
            return Err(Error::Plan(format!("rounds {:?} are not strictly increasing", self.round_ids())));
        }
        if !self.ablation {
            for (i, r) in self.rounds.iter().enumerate() {
                if r.round as usize != i {
                    return Err(Error::Plan(format!(
                        "round {} needs round {} first; set the ablation flag to skip it",
                        r.round,
                        r.round.saturating_sub(1)
                    )));
                }
                if r.init == RoundInit::SftPit && i > 0 {
                    return Err(Error::Plan(format!(
                        "round {} restarts from the SFT improver; set the ablation flag to allow it",
                        r.round
                    )));
                }
            }
        }
        if let Some(r2) = self.rounds.iter().position(|r| r.round == 2) {
            if r2 == 0 || self.rounds[r2 - 1].round != 1 {
                return Err(Error::Plan("round 2 needs a round-1 checkpoint".into()));
            }
        }
        Ok(())
    }
}

/// Frozen inputs shared by every round.
#[derive(Debug, Clone, Copy)]
pub struct CurriculumArtifacts<'a> {
    pub pit_sft: &'a SeqModel,
    pub policy_rl: &'a SeqModel,
    pub reward_gap: RewardSource<'a>,
    pub fold: &'a [PreferenceExample],
    pub validation: &'a [PreferenceExample],
    /// Stages behind the SFT improver, oldest first.
    pub pit_ancestry: &'a [Stage],
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: u8,
    pub outcome: RlOutcome,
    /// Full lineage ending with this round's stage.
    pub ancestry: Vec<Stage>,
}

impl RoundOutcome {
    pub fn stage(&self) -> Stage {
        self.outcome.stage
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (last, earlier) = self.ancestry.split_last().expect("ancestry ends with the round stage");
        Checkpoint::from_seq_model(&self.outcome.model, ModelKind::Pit, *last, earlier.to_vec())
    }
}

pub fn run_curriculum(plan: &CurriculumPlan, art: &CurriculumArtifacts<'_>) -> Result<Vec<RoundOutcome>> {
    plan.validate()?;
    let mut out: Vec<RoundOutcome> = Vec::new();
    for r in &plan.rounds {
        let (init, mut ancestry) = match (r.init, out.last()) {
            (RoundInit::Previous, Some(prev)) => (prev.outcome.model.clone(), prev.ancestry.clone()),
            _ => {
                let mut a = art.pit_ancestry.to_vec();
                a.push(Stage::SftPit);
                (art.pit_sft.clone(), a)
            }
        };
        log::info!("improver RL round {} ({} steps)", r.round, r.rl.steps);
        let outcome = match r.round {
            0 => rl_pit_round0(&init, art.reward_gap, art.fold, art.validation, &r.rl)?,
            1 => rl_pit_round1(&init, art.pit_sft, art.policy_rl, art.reward_gap, art.fold, art.validation, &r.rl)?,
            2 => rl_pit_round2(&init, art.pit_sft, art.policy_rl, art.reward_gap, art.fold, art.validation, &r.rl)?,
            n => return Err(Error::Plan(format!("unknown round {n}"))),
        };
        ancestry.push(outcome.stage);
        out.push(RoundOutcome {
            round: r.round,
            outcome,
            ancestry,
        });
    }
    Ok(out)
}

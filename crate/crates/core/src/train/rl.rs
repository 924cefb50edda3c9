//! KL-regularized policy-gradient training for the policy and the improver.
//!
//! Each rollout's return is `r - beta * (log pi(y|c) - log pi_ref(y|c))`, with
//! the KL term estimated on the sampled sequence. Advantages subtract an EMA
//! baseline. The default update is plain REINFORCE; setting `clip_epsilon`
//! switches to a clipped-ratio surrogate optimized for `ppo_epochs` passes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MetricsRow;
use crate::checkpoint::Stage;
use crate::env::{quality_unchecked, PreferenceExample, TaskInstance};
use crate::error::{Error, Result};
use crate::format::{format_pit_input, format_policy_input};
use crate::model::{Sample, SeqModel};
use crate::optim::Adam;
use crate::reward::{RewardKind, RewardModel};
use crate::seed::derive_seed;
use crate::vocab::{Token, TokenSeq};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    /// KL coefficient.
    pub beta: f64,
    pub steps: usize,
    /// Prompts per optimizer step.
    pub batch_size: usize,
    pub samples_per_prompt: usize,
    pub learning_rate: f64,
    pub baseline: Baseline,
    /// EMA coefficient of the reward baseline.
    pub baseline_decay: f64,
    pub clip_epsilon: Option<f64>,
    pub ppo_epochs: usize,
    pub temperature: f64,
    pub max_len: usize,
    /// Metrics rows average over this many steps.
    pub log_every: usize,
    /// Checkpoint-selection cadence.
    pub eval_every: usize,
    /// Validation prompts scored at each selection point.
    pub eval_size: usize,
    /// Overrides the stage's default selection criterion.
    pub selection: Option<Selection>,
    /// Sampling temperature while scoring candidates; defaults to `temperature`.
    pub selection_temperature: Option<f64>,
    pub oracle_lambda: f64,
    pub round: u8,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            beta: 0.05,
            steps: 200,
            batch_size: 16,
            samples_per_prompt: 2,
            learning_rate: 5e-4,
            baseline: Baseline::Ema,
            baseline_decay: 0.9,
            clip_epsilon: None,
            ppo_epochs: 1,
            temperature: 1.0,
            max_len: 16,
            log_every: 10,
            eval_every: 50,
            eval_size: 64,
            selection: None,
            selection_temperature: None,
            oracle_lambda: 0.5,
            round: 0,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        if self.round > 2 {
            return Err(Error::Config(format!("round {} is not in {{0,1,2}}", self.round)));
        }
        if self.batch_size == 0 || self.samples_per_prompt == 0 || self.ppo_epochs == 0 {
            return Err(Error::Config("batch size, samples per prompt and ppo epochs must be >= 1".into()));
        }
        if self.log_every == 0 || self.eval_every == 0 || self.max_len == 0 {
            return Err(Error::Config("cadences and max_len must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("learning rate must be >= 0 and baseline decay in [0,1)".into()));
        }
        if let Some(t) = self.selection_temperature {
            if !(t >= 0.0) {
                return Err(Error::Config("selection temperature must be >= 0".into()));
            }
        }
        if let Some(eps) = self.clip_epsilon {
            if !(eps > 0.0) {
                return Err(Error::Config("clip epsilon must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Advantage baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Exponential moving average of batch-mean returns.
    Ema,
    /// Mean return of the other samples drawn for the same prompt visit
    /// (same reference); falls back to the EMA for singleton groups.
    LeaveOneOut,
}

/// Where rewards come from during RL.
#[derive(Debug, Clone, Copy)]
pub enum RewardSource<'a> {
    Model(&'a RewardModel),
    /// Ground-truth quality (improver rollouts score the quality difference).
    Oracle { lambda: f64 },
    Constant(f64),
}

impl RewardSource<'_> {
    fn score(&self, task: &TaskInstance, y: &[Token], y_ref: Option<&[Token]>) -> Result<f64> {
        let x = task.instruction();
        match (*self, y_ref) {
            (RewardSource::Constant(c), _) => Ok(c),
            (RewardSource::Oracle { lambda }, None) => Ok(quality_unchecked(&task.required, y, lambda)),
            (RewardSource::Oracle { lambda }, Some(r)) => {
                Ok(quality_unchecked(&task.required, y, lambda) - quality_unchecked(&task.required, r, lambda))
            }
            (RewardSource::Model(m), None) => match m.kind {
                RewardKind::Policy => m.reward(x, y),
                RewardKind::Gap => Err(Error::InvalidInput("policy RL needs a policy reward model".into())),
            },
            (RewardSource::Model(m), Some(r)) => m.preference_score(x, y, r),
        }
    }
}

/// Reference-response source for improver rollouts.
#[derive(Debug, Clone, Copy)]
pub enum RefSource<'a> {
    /// Policy RL: no reference.
    None,
    /// Uniformly one of the example's `y_l` / `y_w`.
    Dataset,
    /// A fresh sample from a frozen policy.
    Policy(&'a SeqModel),
    /// A frozen improver's output over a fresh policy sample.
    Improved { policy: &'a SeqModel, pit: &'a SeqModel },
}

/// Provenance of one rollout's reference, kept for audits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub example_id: String,
    pub reference: TokenSeq,
    /// For two-stage references: the policy sample the improver saw.
    pub upstream: Option<TokenSeq>,
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    /// Selected checkpoint.
    pub model: SeqModel,
    pub final_model: SeqModel,
    pub metrics: Vec<MetricsRow>,
    pub selected_step: usize,
    /// (step, selection score).
    pub selection_trace: Vec<(usize, f64)>,
    pub references: Vec<ReferenceRecord>,
    pub stage: Stage,
}

/// Checkpoint-selection criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Mean oracle quality of held-out samples.
    OracleQuality,
    /// Mean training reward of held-out samples.
    MeanReward,
}

const REF_RETRIES: usize = 4;

fn draw_reference<R: Rng + ?Sized>(
    src: RefSource<'_>,
    ex: &PreferenceExample,
    cfg: &RlConfig,
    rng: &mut R,
) -> Result<Option<(TokenSeq, Option<TokenSeq>)>> {
    let x = ex.task.instruction();
    match src {
        RefSource::None => Ok(None),
        RefSource::Dataset => {
            let r = if rng.gen_bool(0.5) { ex.chosen_body() } else { ex.rejected_body() };
            Ok(Some((r.to_vec(), None)))
        }
        RefSource::Policy(p) => {
            let ctx = format_policy_input(x, &p.vocab())?;
            for _ in 0..REF_RETRIES {
                let s = p.sample_with(&ctx, 1.0, cfg.max_len, rng)?;
                if !s.tokens.is_empty() {
                    return Ok(Some((s.tokens, None)));
                }
            }
            Ok(Some((Vec::new(), None)))
        }
        RefSource::Improved { policy, pit } => {
            let ctx = format_policy_input(x, &policy.vocab())?;
            for _ in 0..REF_RETRIES {
                let y1 = policy.sample_with(&ctx, 1.0, cfg.max_len, rng)?;
                if y1.tokens.is_empty() {
                    continue;
                }
                let pctx = format_pit_input(x, &y1.tokens, &pit.vocab())?;
                let y = pit.sample_with(&pctx, 1.0, cfg.max_len, rng)?;
                if !y.tokens.is_empty() {
                    return Ok(Some((y.tokens, Some(y1.tokens))));
                }
            }
            Ok(Some((Vec::new(), None)))
        }
    }
}

struct Rollout {
    ctx: TokenSeq,
    actions: TokenSeq,
    logp: f64,
    reward: f64,
    kl: f64,
    quality: f64,
    group: usize,
}

/// Mean sequence-level KL estimate `log pi - log pi_ref` over the given
/// (context, sample) pairs.
pub fn sequence_kl(model: &SeqModel, reference: &SeqModel, rollouts: &[(TokenSeq, Sample)]) -> Result<f64> {
    if rollouts.is_empty() {
        return Err(Error::Empty("rollouts"));
    }
    let mut total = 0.0;
    for (ctx, s) in rollouts {
        let a = s.actions();
        total += model.log_prob(ctx, &a)? - reference.log_prob(ctx, &a)?;
    }
    Ok(total / rollouts.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn rl_loop(
    mut model: SeqModel,
    reference: &SeqModel,
    prompts: &[PreferenceExample],
    validation: &[PreferenceExample],
    refs: RefSource<'_>,
    reward: RewardSource<'_>,
    cfg: &RlConfig,
    selection: Selection,
    stage: Stage,
) -> Result<RlOutcome> {
    cfg.validate()?;
    let selection = cfg.selection.unwrap_or(selection);
    if prompts.is_empty() {
        return Err(Error::Empty("RL fold"));
    }
    if model.vocab_hash != reference.vocab_hash {
        return Err(Error::VocabMismatch {
            expected: reference.vocab_hash.clone(),
            found: model.vocab_hash.clone(),
        });
    }
    let vocab = model.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.param_count(), cfg.learning_rate);
    let mut grads = vec![0.0; model.param_count()];
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut baseline: Option<f64> = None;

    let mut metrics = Vec::new();
    let mut window = (0usize, 0.0, 0.0, 0.0, 0.0); // rollouts, loss, reward, kl, quality
    let mut references = Vec::new();
    let mut selection_trace = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let eval_set = &validation[..validation.len().min(cfg.eval_size)];

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size * cfg.samples_per_prompt);
        let mut group = 0usize;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &prompts[order[cursor]];
            cursor += 1;
            let x = ex.task.instruction();
            let (ctx, y_ref) = match draw_reference(refs, ex, cfg, &mut rng)? {
                None => (format_policy_input(x, &vocab)?, None),
                Some((r, _)) if r.is_empty() => {
                    log::debug!("{stage}: no usable reference for {}, rollout skipped", ex.id());
                    continue;
                }
                Some((r, upstream)) => {
                    references.push(ReferenceRecord {
                        example_id: ex.id().to_string(),
                        reference: r.clone(),
                        upstream,
                    });
                    (format_pit_input(x, &r, &vocab)?, Some(r))
                }
            };
            for _ in 0..cfg.samples_per_prompt {
                let s = model.sample_with(&ctx, cfg.temperature, cfg.max_len, &mut rng)?;
                let actions = s.actions();
                let logp = model.log_prob(&ctx, &actions)?;
                let kl = logp - reference.log_prob(&ctx, &actions)?;
                let r = reward.score(&ex.task, &s.tokens, y_ref.as_deref())?;
                let quality = quality_unchecked(&ex.task.required, &s.tokens, cfg.oracle_lambda);
                batch.push(Rollout {
                    ctx: ctx.clone(),
                    actions,
                    logp,
                    reward: r,
                    kl,
                    quality,
                    group,
                });
            }
            group += 1;
        }
        if batch.is_empty() {
            continue;
        }

        let n = batch.len() as f64;
        let returns: Vec<f64> = batch.iter().map(|r| r.reward - cfg.beta * r.kl).collect();
        let mean_return = returns.iter().sum::<f64>() / n;
        let b = *baseline.get_or_insert(mean_return);
        let adv: Vec<f64> = match cfg.baseline {
            Baseline::Ema => returns.iter().map(|g| g - b).collect(),
            Baseline::LeaveOneOut => {
                let mut sums = vec![(0.0, 0usize); group];
                for (r, g) in batch.iter().zip(&returns) {
                    sums[r.group].0 += g;
                    sums[r.group].1 += 1;
                }
                batch
                    .iter()
                    .zip(&returns)
                    .map(|(r, g)| match sums[r.group] {
                        (_, 1) => g - b,
                        (sum, k) => g - (sum - g) / (k - 1) as f64,
                    })
                    .collect()
            }
        };
        baseline = Some(cfg.baseline_decay * b + (1.0 - cfg.baseline_decay) * mean_return);

        let loss = -batch.iter().zip(&adv).map(|(r, a)| a * r.logp).sum::<f64>() / n;
        for _ in 0..cfg.ppo_epochs {
            grads.fill(0.0);
            for (r, &a) in batch.iter().zip(&adv) {
                let scale = match cfg.clip_epsilon {
                    None => -a / n,
                    Some(eps) => {
                        let ratio = (model.log_prob(&r.ctx, &r.actions)? - r.logp).exp();
                        let clipped = (a > 0.0 && ratio > 1.0 + eps) || (a < 0.0 && ratio < 1.0 - eps);
                        if clipped {
                            continue;
                        }
                        -a * ratio / n
                    }
                };
                model.log_prob_grad(&r.ctx, &r.actions, scale, &mut grads)?;
            }
            opt.step(&mut model.params, &grads);
            if cfg.clip_epsilon.is_none() {
                break;
            }
        }

        window.0 += batch.len();
        window.1 += loss * n;
        for r in &batch {
            window.2 += r.reward;
            window.3 += r.kl;
            window.4 += r.quality;
        }
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let k = window.0 as f64;
            metrics.push(MetricsRow {
                step: step + 1,
                loss: window.1 / k,
                mean_reward: Some(window.2 / k),
                mean_kl: Some(window.3 / k),
                mean_oracle_quality: Some(window.4 / k),
            });
            window = (0, 0.0, 0.0, 0.0, 0.0);
        }

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let score = selection_score(&model, eval_set, refs, reward, cfg, selection)?;
            selection_trace.push((step + 1, score));
            if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
                best = Some((score, step + 1, model.params.clone()));
            }
        }
    }

    let final_model = model.clone();
    let selected_step = match best {
        Some((score, step, params)) => {
            log::info!("{stage}: selected step {step} (score {score:.4})");
            model.params = params;
            step
        }
        None => cfg.steps,
    };
    Ok(RlOutcome {
        model,
        final_model,
        metrics,
        selected_step,
        selection_trace,
        references,
        stage,
    })
}

/// Held-out score used to pick the RL checkpoint; fixed seeds per prompt so
/// every candidate sees the same references and sampling noise.
fn selection_score(
    model: &SeqModel,
    eval_set: &[PreferenceExample],
    refs: RefSource<'_>,
    reward: RewardSource<'_>,
    cfg: &RlConfig,
    selection: Selection,
) -> Result<f64> {
    if eval_set.is_empty() {
        return Ok(0.0);
    }
    let vocab = model.vocab();
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, ex) in eval_set.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("select/{i}")));
        let x = ex.task.instruction();
        let (ctx, y_ref) = match draw_reference(refs, ex, cfg, &mut rng)? {
            None => (format_policy_input(x, &vocab)?, None),
            Some((r, _)) if r.is_empty() => continue,
            Some((r, _)) => (format_pit_input(x, &r, &vocab)?, Some(r)),
        };
        let temp = cfg.selection_temperature.unwrap_or(cfg.temperature);
        let s = model.sample_with(&ctx, temp, cfg.max_len, &mut rng)?;
        total += match selection {
            Selection::OracleQuality => quality_unchecked(&ex.task.required, &s.tokens, cfg.oracle_lambda),
            Selection::MeanReward => reward.score(&ex.task, &s.tokens, y_ref.as_deref())?,
        };
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

/// Policy RL against the policy reward, anchored to the frozen SFT policy.
pub fn rl_policy(
    policy_sft: &SeqModel,
    reward: RewardSource<'_>,
    fold: &[PreferenceExample],
    validation: &[PreferenceExample],
    cfg: &RlConfig,
) -> Result<RlOutcome> {
    rl_loop(
        policy_sft.clone(),
        policy_sft,
        fold,
        validation,
        RefSource::None,
        reward,
        cfg,
        Selection::OracleQuality,
        Stage::RlPolicy,
    )
}

/// First improver round: references are the dataset's own responses.
pub fn rl_pit_round0(
    pit_sft: &SeqModel,
    reward_gap: RewardSource<'_>,
    fold: &[PreferenceExample],
    validation: &[PreferenceExample],
    cfg: &RlConfig,
) -> Result<RlOutcome> {
    rl_loop(
        pit_sft.clone(),
        pit_sft,
        fold,
        validation,
        RefSource::Dataset,
        reward_gap,
        cfg,
        Selection::MeanReward,
        Stage::RlPitR0,
    )
}

/// Second improver round: references are fresh samples of the RL policy.
/// `init` is the round-0 checkpoint, or the SFT improver for the
/// second-round-only ablation; the KL anchor is always the SFT improver.
#[allow(clippy::too_many_arguments)]
pub fn rl_pit_round1(
    init: &SeqModel,
    pit_sft: &SeqModel,
    policy_rl: &SeqModel,
    reward_gap: RewardSource<'_>,
    fold: &[PreferenceExample],
    validation: &[PreferenceExample],
    cfg: &RlConfig,
) -> Result<RlOutcome> {
    rl_loop(
        init.clone(),
        pit_sft,
        fold,
        validation,
        RefSource::Policy(policy_rl),
        reward_gap,
        cfg,
        Selection::MeanReward,
        Stage::RlPitR1,
    )
}

/// Optional third round: references are the round-1 improver's output over
/// a policy sample.
#[allow(clippy::too_many_arguments)]
pub fn rl_pit_round2(
    pit_r1: &SeqModel,
    pit_sft: &SeqModel,
    policy_rl: &SeqModel,
    reward_gap: RewardSource<'_>,
    fold: &[PreferenceExample],
    validation: &[PreferenceExample],
    cfg: &RlConfig,
) -> Result<RlOutcome> {
    let frozen = pit_r1.clone();
    rl_loop(
        pit_r1.clone(),
        pit_sft,
        fold,
        validation,
        RefSource::Improved {
            policy: policy_rl,
            pit: &frozen,
        },
        reward_gap,
        cfg,
        Selection::MeanReward,
        Stage::RlPitR2,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{gen_dataset, EnvConfig};
    use crate::model::tests::{check_grad, tiny_arch};
    use crate::model::SamplingConfig;
    use crate::vocab::Vocab;

    fn small_env() -> EnvConfig {
        EnvConfig {
            max_required: 3,
            max_junk: 2,
            dataset_size: 40,
            ..EnvConfig::default()
        }
    }

    fn data() -> Vec<PreferenceExample> {
        gen_dataset(&small_env(), 5).unwrap()
    }

    fn model(seed: u64) -> SeqModel {
        SeqModel::new(tiny_arch(), Vocab::default().hash(), seed).unwrap()
    }

    fn cfg(steps: usize) -> RlConfig {
        RlConfig {
            steps,
            batch_size: 4,
            samples_per_prompt: 2,
            max_len: 5,
            log_every: 1,
            eval_every: 5,
            eval_size: 4,
            learning_rate: 1e-3,
            seed: 3,
            ..RlConfig::default()
        }
    }

    #[test]
    fn round0_references_come_from_the_dataset() {
        let d = data();
        let out = rl_pit_round0(&model(1), RewardSource::Oracle { lambda: 0.5 }, &d, &d[..4], &cfg(6)).unwrap();
        assert_eq!(out.stage, Stage::RlPitR0);
        assert_eq!(out.references.len(), 6 * 4);
        let mut saw = (false, false);
        for rec in &out.references {
            let ex = d.iter().find(|e| e.id() == rec.example_id).unwrap();
            let w = rec.reference == ex.chosen_body();
            let l = rec.reference == ex.rejected_body();
            assert!(w || l);
            saw.0 |= w;
            saw.1 |= l;
            assert!(rec.upstream.is_none());
        }
        assert!(saw.0 && saw.1);
    }

    #[test]
    fn round1_references_are_policy_samples() {
        let d = data();
        let policy = model(9);
        let out = rl_pit_round1(&model(1), &model(1), &policy, RewardSource::Oracle { lambda: 0.5 }, &d, &d[..4], &cfg(6))
            .unwrap();
        assert_eq!(out.stage, Stage::RlPitR1);
        assert!(!out.references.is_empty());
        let mut from_data = 0;
        for rec in &out.references {
            let ex = d.iter().find(|e| e.id() == rec.example_id).unwrap();
            if rec.reference == ex.chosen_body() || rec.reference == ex.rejected_body() {
                from_data += 1;
            }
            assert!(!rec.reference.is_empty());
        }
        assert!(from_data * 10 < out.references.len(), "{from_data} of {}", out.references.len());
    }

    #[test]
    fn round2_references_are_improver_outputs_over_policy_samples() {
        let d = data();
        let out = rl_pit_round2(&model(1), &model(1), &model(9), RewardSource::Oracle { lambda: 0.5 }, &d, &d[..4], &cfg(4))
            .unwrap();
        assert_eq!(out.stage, Stage::RlPitR2);
        assert!(!out.references.is_empty());
        assert!(out.references.iter().all(|r| r.upstream.as_ref().is_some_and(|u| !u.is_empty())));
    }

    fn rollouts(m: &SeqModel, d: &[PreferenceExample], n: usize) -> Vec<(TokenSeq, Sample)> {
        let v = m.vocab();
        (0..n)
            .map(|i| {
                let ctx = format_policy_input(d[i % d.len()].task.instruction(), &v).unwrap();
                let s = m.sample(&ctx, &SamplingConfig::new(1.0, 5, i as u64)).unwrap();
                (ctx, s)
            })
            .collect()
    }

    #[test]
    fn huge_beta_keeps_the_policy_at_its_reference() {
        let d = data();
        let sft = model(1);
        let c = RlConfig {
            beta: 1e6,
            ..cfg(20)
        };
        let out = rl_policy(&sft, RewardSource::Oracle { lambda: 0.5 }, &d, &d[..4], &c).unwrap();
        let kl = sequence_kl(&out.final_model, &sft, &rollouts(&out.final_model, &d, 300)).unwrap();
        assert!(kl.abs() < 1e-2, "kl {kl}");
        let drift = out.final_model.params.iter().zip(&sft.params).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift <= 20.0 * 1e-3 * 1.01, "drift {drift}");
    }

    #[test]
    fn constant_reward_pulls_toward_the_reference() {
        let d = data();
        let reference = model(1);
        let mut start = reference.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in start.params.iter_mut() {
            *p += rng.gen_range(-0.05..0.05);
        }
        let c = RlConfig {
            beta: 1.0,
            batch_size: 8,
            samples_per_prompt: 4,
            baseline: Baseline::LeaveOneOut,
            ..cfg(60)
        };
        let before = sequence_kl(&start, &reference, &rollouts(&start, &d, 400)).unwrap();
        let out = rl_loop(
            start,
            &reference,
            &d,
            &d[..4],
            RefSource::None,
            RewardSource::Constant(1.0),
            &c,
            Selection::OracleQuality,
            Stage::RlPolicy,
        )
        .unwrap();
        let after = sequence_kl(&out.final_model, &reference, &rollouts(&out.final_model, &d, 400)).unwrap();
        assert!(after < before, "{after} !< {before}");
        assert!(out.metrics.iter().all(|r| r.mean_reward == Some(1.0)));
    }

    #[test]
    fn metrics_rows_follow_the_logging_cadence() {
        let d = data();
        let c = RlConfig { log_every: 3, ..cfg(7) };
        let out = rl_policy(&model(1), RewardSource::Oracle { lambda: 0.5 }, &d, &d[..4], &c).unwrap();
        let steps: Vec<usize> = out.metrics.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![3, 6, 7]);
        assert!(out.selection_trace.iter().all(|(s, _)| *s > 0));
        assert!(out.selected_step > 0);
    }

    #[test]
    fn invalid_configs_and_inputs_are_rejected() {
        let d = data();
        let m = model(1);
        let bad = RlConfig { round: 3, ..cfg(1) };
        assert!(matches!(rl_policy(&m, RewardSource::Constant(0.0), &d, &d, &bad), Err(Error::Config(_))));
        let bad = RlConfig { beta: -1.0, ..cfg(1) };
        assert!(matches!(rl_policy(&m, RewardSource::Constant(0.0), &d, &d, &bad), Err(Error::Config(_))));
        assert!(matches!(rl_policy(&m, RewardSource::Constant(0.0), &[], &d, &cfg(1)), Err(Error::Empty(_))));
        let other = SeqModel::new(tiny_arch(), "other", 1).unwrap();
        assert!(matches!(
            rl_pit_round0(&other, RewardSource::Constant(0.0), &d, &d, &cfg(1)).and(rl_policy(&m, RewardSource::Constant(0.0), &d, &d, &cfg(1))).map(|_| ()),
            Ok(())
        ));
        assert!(matches!(
            rl_pit_round1(&m, &other, &m, RewardSource::Constant(0.0), &d, &d, &cfg(1)),
            Err(Error::VocabMismatch { .. })
        ));
        let gap = RewardModel::new(RewardKind::Gap, tiny_arch(), Vocab::default().hash(), 1).unwrap();
        assert!(rl_policy(&m, RewardSource::Model(&gap), &d, &d, &cfg(1)).is_err());
    }

    #[test]
    fn reinforce_surrogate_gradient_matches_finite_differences() {
        let d = data();
        let m = model(2);
        let batch = rollouts(&m, &d, 4);
        let adv = [0.7, -0.3, 1.1, -0.9];
        let n = batch.len() as f64;
        let mut g = vec![0.0; m.param_count()];
        for ((ctx, s), a) in batch.iter().zip(adv) {
            m.log_prob_grad(ctx, &s.actions(), -a / n, &mut g).unwrap();
        }
        let mut probe = m.clone();
        check_grad(&m.params, &g, |p| {
            probe.params.copy_from_slice(p);
            -batch.iter().zip(adv).map(|((c, s), a)| a * probe.log_prob(c, &s.actions()).unwrap()).sum::<f64>() / n
        }, 150, 7);
    }

    #[test]
    fn clipped_surrogate_gradient_matches_finite_differences() {
        let d = data();
        let old = model(2);
        let mut m = old.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in m.params.iter_mut() {
            *p += rng.gen_range(-0.01..0.01);
        }
        let batch = rollouts(&old, &d, 4);
        let old_lp: Vec<f64> = batch.iter().map(|(c, s)| old.log_prob(c, &s.actions()).unwrap()).collect();
        let adv = [0.7, -0.3, 1.1, -0.9];
        let n = batch.len() as f64;
        let mut g = vec![0.0; m.param_count()];
        for (((ctx, s), a), lp0) in batch.iter().zip(adv).zip(&old_lp) {
            let ratio = (m.log_prob(ctx, &s.actions()).unwrap() - lp0).exp();
            m.log_prob_grad(ctx, &s.actions(), -a * ratio / n, &mut g).unwrap();
        }
        let mut probe = m.clone();
        check_grad(&m.params, &g, |p| {
            probe.params.copy_from_slice(p);
            -batch
                .iter()
                .zip(adv)
                .zip(&old_lp)
                .map(|(((c, s), a), lp0)| a * (probe.log_prob(c, &s.actions()).unwrap() - lp0).exp())
                .sum::<f64>()
                / n
        }, 150, 9);
    }

    #[test]
    fn clipped_mode_runs_multiple_epochs() {
        let d = data();
        let c = RlConfig {
            clip_epsilon: Some(0.2),
            ppo_epochs: 3,
            ..cfg(4)
        };
        let out = rl_policy(&model(1), RewardSource::Oracle { lambda: 0.5 }, &d, &d[..4], &c).unwrap();
        assert_ne!(out.final_model.params, model(1).params);
    }
}

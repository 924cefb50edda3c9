use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MetricsRow, TrainConfig};
use crate::env::PreferenceExample;
use crate::error::{Error, Result};
use crate::format::{format_pit_input, format_policy_input};
use crate::model::SeqModel;
use crate::optim::Adam;
use crate::vocab::TokenSeq;

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub model: SeqModel,
    pub metrics: Vec<MetricsRow>,
    pub steps: usize,
    /// Examples consumed across all epochs.
    pub examples_seen: usize,
}

/// Maximum likelihood of `y_w` given the policy layout.
pub fn sft_policy(model: SeqModel, fold: &[PreferenceExample], cfg: &TrainConfig) -> Result<SftOutcome> {
    let vocab = model.vocab();
    let pairs = fold
        .iter()
        .map(|ex| Ok((format_policy_input(ex.task.instruction(), &vocab)?, ex.chosen.clone())))
        .collect::<Result<Vec<_>>>()?;
    supervised(model, &pairs, cfg)
}

/// Maximum likelihood of `y_w` given the improver layout with `y_l` as the
/// candidate. No unlikelihood terms.
pub fn sft_pit(model: SeqModel, fold: &[PreferenceExample], cfg: &TrainConfig) -> Result<SftOutcome> {
    let vocab = model.vocab();
    let pairs = fold
        .iter()
        .map(|ex| {
            Ok((
                format_pit_input(ex.task.instruction(), ex.rejected_body(), &vocab)?,
                ex.chosen.clone(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    supervised(model, &pairs, cfg)
}

pub(crate) fn supervised(mut model: SeqModel, pairs: &[(TokenSeq, TokenSeq)], cfg: &TrainConfig) -> Result<SftOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("fold"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.param_count(), cfg.learning_rate);
    let mut grads = vec![0.0; model.param_count()];
    let mut metrics = Vec::new();
    let mut step = 0;
    let mut seen = 0;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let total = cfg.epochs * pairs.len().div_ceil(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            grads.fill(0.0);
            let scale = -1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                let (ctx, tgt) = &pairs[i];
                loss += scale * model.log_prob_grad(ctx, tgt, scale, &mut grads)?;
            }
            if step % cfg.log_every == 0 {
                metrics.push(MetricsRow::loss_only(step, loss));
            }
            opt.lr = cfg.schedule.rate(cfg.learning_rate, step, total);
            opt.step(&mut model.params, &grads);
            step += 1;
            seen += chunk.len();
        }
    }
    Ok(SftOutcome {
        model,
        metrics,
        steps: step,
        examples_seen: seen,
    })
}

/// Unconditional next-token training over raw sequences.
pub fn pretrain_lm(mut model: SeqModel, corpus: &[TokenSeq], cfg: &TrainConfig) -> Result<SftOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.param_count(), cfg.learning_rate);
    let mut grads = vec![0.0; model.param_count()];
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;
    let mut seen = 0;
    let total = cfg.epochs * corpus.len().div_ceil(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            grads.fill(0.0);
            let scale = -1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                loss += scale * model.sequence_log_likelihood_grad(&corpus[i], scale, Some(&mut grads))?;
            }
            if step % cfg.log_every == 0 {
                metrics.push(MetricsRow::loss_only(step, loss));
            }
            opt.lr = cfg.schedule.rate(cfg.learning_rate, step, total);
            opt.step(&mut model.params, &grads);
            step += 1;
            seen += chunk.len();
        }
    }
    Ok(SftOutcome {
        model,
        metrics,
        steps: step,
        examples_seen: seen,
    })
}

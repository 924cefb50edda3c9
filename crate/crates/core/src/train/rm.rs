use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MetricsRow, TrainConfig};
use crate::env::PreferenceExample;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::reward::{pairwise_accuracy, rm_loss, Reduction, RewardModel, RmObjective};

#[derive(Debug, Clone)]
pub struct RmOutcome {
    /// Checkpoint with the highest held-out accuracy.
    pub model: RewardModel,
    pub metrics: Vec<MetricsRow>,
    pub best_accuracy: f64,
    pub best_step: usize,
    /// (step, held-out accuracy) at every evaluation.
    pub accuracy_trace: Vec<(usize, f64)>,
}

pub fn train_rm(
    mut model: RewardModel,
    fold: &[PreferenceExample],
    validation: &[PreferenceExample],
    cfg: &TrainConfig,
    objective: RmObjective,
) -> Result<RmOutcome> {
    cfg.validate()?;
    if fold.is_empty() {
        return Err(Error::Empty("fold"));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.params.len(), cfg.learning_rate);
    let mut grads = vec![0.0; model.params.len()];
    let mut metrics = Vec::new();
    let mut trace = Vec::new();

    let mut best = (pairwise_accuracy(&model, validation)?, 0usize, model.params.clone());
    trace.push((0, best.0));

    let mut order: Vec<usize> = (0..fold.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PreferenceExample> = chunk.iter().map(|&i| fold[i].clone()).collect();
            grads.fill(0.0);
            let loss = rm_loss(&model, &batch, objective, Reduction::Mean, Some(&mut grads))?;
            if step % cfg.log_every == 0 {
                metrics.push(MetricsRow::loss_only(step, loss));
            }
            opt.step(&mut model.params, &grads);
            step += 1;
            if step % cfg.eval_every == 0 {
                let acc = pairwise_accuracy(&model, validation)?;
                trace.push((step, acc));
                if acc > best.0 {
                    best = (acc, step, model.params.clone());
                }
            }
        }
    }
    if step % cfg.eval_every != 0 {
        let acc = pairwise_accuracy(&model, validation)?;
        trace.push((step, acc));
        if acc > best.0 {
            best = (acc, step, model.params.clone());
        }
    }
    log::info!("reward model ({objective:?}): best held-out accuracy {:.4} at step {}", best.0, best.1);
    model.params = best.2;
    model.center(fold)?;
    Ok(RmOutcome {
        model,
        metrics,
        best_accuracy: best.0,
        best_step: best.1,
        accuracy_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{gen_dataset, EnvConfig};
    use crate::model::ArchConfig;
    use crate::reward::RewardKind;

    #[test]
    fn first_logged_loss_matches_zero_head_value() {
        let cfg = EnvConfig {
            dataset_size: 24,
            ..EnvConfig::default()
        };
        let data = gen_dataset(&cfg, 3).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::rm()
        };
        for (kind, obj, expected) in [
            (RewardKind::Policy, RmObjective::Pairwise, std::f64::consts::LN_2),
            (RewardKind::Gap, RmObjective::GapChain, 5.0 * std::f64::consts::LN_2),
        ] {
            let m = RewardModel::new(kind, ArchConfig::default(), "h", 1).unwrap();
            let out = train_rm(m, &data[..16], &data[16..], &tc, obj).unwrap();
            let first = out.metrics[0].loss;
            assert!((first - expected).abs() / expected < 0.01, "{first}");
            assert_eq!(out.metrics.len(), 2);
        }
    }

    #[test]
    fn empty_fold_is_rejected() {
        let m = RewardModel::new(RewardKind::Gap, ArchConfig::default(), "h", 1).unwrap();
        assert!(train_rm(m, &[], &[], &TrainConfig::rm(), RmObjective::GapChain).is_err());
    }
}

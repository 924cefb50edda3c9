use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pitlab::env::{gen_dataset, gen_task, oracle_quality, split_folds, write_folds_jsonl, EnvConfig};
use pitlab::eval::{EvalReport, EvaluatorKind};
use pitlab::format::format_policy_input;
use pitlab::improve::{improve_chain, GenerationCounter, ImproveConfig};
use pitlab::model::{ArchConfig, Sample, SamplingConfig, SeqModel};
use pitlab::reward::{rm_loss_gap, rm_loss_policy, RewardKind, RewardModel, Verdict};
use pitlab::train::{rl_policy, sequence_kl, Baseline, RewardSource, RlConfig};
use pitlab::vocab::{TokenSeq, Vocab};

fn small_arch() -> ArchConfig {
    ArchConfig {
        vocab_size: 38,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        context_len: 24,
    }
}

fn small_env() -> EnvConfig {
    EnvConfig {
        max_required: 3,
        max_junk: 2,
        response_cap: 6,
        dataset_size: 40,
        ..EnvConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_quality_stays_in_unit_range(
        seed in any::<u64>(),
        body in prop::collection::vec(6u32..38, 0..16),
        lambda in 0.0f64..2.0,
    ) {
        let task = gen_task(seed, &EnvConfig::default()).unwrap();
        let q = oracle_quality(&task, &body, &Vocab::default(), lambda).unwrap();
        prop_assert!((0.0..=1.0).contains(&q), "{q}");
    }

    #[test]
    fn generated_pairs_respect_the_margin(seed in any::<u64>()) {
        let cfg = EnvConfig { dataset_size: 30, ..EnvConfig::default() };
        let vocab = cfg.vocab().unwrap();
        for ex in gen_dataset(&cfg, seed).unwrap() {
            let qw = oracle_quality(&ex.task, ex.chosen_body(), &vocab, cfg.lambda).unwrap();
            let ql = oracle_quality(&ex.task, ex.rejected_body(), &vocab, cfg.lambda).unwrap();
            prop_assert!(qw - ql >= cfg.margin - 1e-12, "{qw} - {ql}");
            prop_assert_eq!(qw, ex.q_chosen);
            prop_assert_eq!(ql, ex.q_rejected);
        }
    }

    #[test]
    fn folds_partition_the_dataset(seed in any::<u64>(), n in 20usize..90, val in 1usize..10) {
        let cfg = EnvConfig { dataset_size: n, ..EnvConfig::default() };
        let data = gen_dataset(&cfg, seed).unwrap();
        let all: BTreeSet<String> = data.iter().map(|e| e.id().to_string()).collect();
        prop_assert_eq!(all.len(), n);
        let folds = split_folds(data, val, seed ^ 1).unwrap();
        let parts = [&folds.sft, &folds.rm, &folds.rl, &folds.validation];
        let mut seen = BTreeSet::new();
        for p in parts {
            prop_assert!(!p.is_empty());
            for ex in p {
                prop_assert!(seen.insert(ex.id().to_string()), "{} in two folds", ex.id());
            }
        }
        prop_assert_eq!(seen, all);
        prop_assert_eq!(folds.validation.len(), val);
    }

    #[test]
    fn generation_is_a_function_of_the_seed(seed in any::<u64>()) {
        let cfg = EnvConfig { dataset_size: 20, ..EnvConfig::default() };
        let bytes = |s: u64| {
            let folds = split_folds(gen_dataset(&cfg, s).unwrap(), 4, s).unwrap();
            let mut buf = Vec::new();
            write_folds_jsonl(&folds, &mut buf).unwrap();
            buf
        };
        prop_assert_eq!(bytes(seed), bytes(seed));
        prop_assert_ne!(bytes(seed), bytes(seed.wrapping_add(1)));
    }

    #[test]
    fn random_models_give_normalized_distributions(seed in any::<u64>(), prompt in prop::collection::vec(6u32..38, 1..6)) {
        let m = SeqModel::new(ArchConfig::default(), Vocab::default().hash(), seed).unwrap();
        let ctx = format_policy_input(&prompt, &m.vocab()).unwrap();
        let p = m.next_token_probs(&ctx).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        let lp = m.log_prob(&ctx, &[prompt[0], 1]).unwrap();
        prop_assert!(lp.is_finite() && lp <= 0.0);
    }

    #[test]
    fn reward_losses_are_strictly_positive(seed in any::<u64>()) {
        let cfg = EnvConfig { dataset_size: 8, ..small_env() };
        let batch = gen_dataset(&cfg, seed).unwrap();
        let vocab = Vocab::default();
        let p = RewardModel::new(RewardKind::Policy, small_arch(), vocab.hash(), seed).unwrap();
        let g = RewardModel::new(RewardKind::Gap, small_arch(), vocab.hash(), seed).unwrap();
        prop_assert!(rm_loss_policy(&p, &batch).unwrap() > 0.0);
        prop_assert!(rm_loss_gap(&g, &batch).unwrap() > 0.0);
    }

    #[test]
    fn report_counts_add_up(v in prop::collection::vec(0u8..3, 1..200)) {
        let verdicts: Vec<Verdict> = v.iter().map(|&i| [Verdict::Win, Verdict::Lose, Verdict::Tie][i as usize]).collect();
        let r = EvalReport::from_verdicts(&verdicts, EvaluatorKind::Oracle).unwrap();
        prop_assert_eq!(r.win + r.lose + r.tie, r.total);
        prop_assert_eq!(r.total, verdicts.len());
        prop_assert!((r.delta - (r.win as f64 - r.lose as f64) / r.total as f64).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chains_are_valid_and_stop_only_at_fixpoints(seed in any::<u64>(), k in 1usize..6, temp in 0.0f64..0.5) {
        let vocab = Vocab::default();
        let policy = SeqModel::new(small_arch(), vocab.hash(), seed).unwrap();
        let pit = SeqModel::new(small_arch(), vocab.hash(), seed ^ 7).unwrap();
        let task = gen_task(seed, &small_env()).unwrap();
        let cfg = ImproveConfig { iterations: k, temperature: temp, max_len: 6, stop_on_fixpoint: true, seed, ..ImproveConfig::default() };
        let mut counter = GenerationCounter::default();
        let chain = improve_chain(&pit, &policy, &task, Some(task.required.clone()), &cfg, &mut counter).unwrap();
        prop_assert_eq!(counter.policy, 0);
        prop_assert_eq!(counter.improver, chain.entries.len() - 1);
        prop_assert!(counter.improver <= k);
        for e in &chain.entries {
            prop_assert!(vocab.check_content(&e.response, "response").is_ok());
            prop_assert!((0.0..=1.0).contains(&e.quality));
        }
        let n = chain.entries.len();
        if chain.stop_index.is_some() {
            prop_assert_eq!(&chain.entries[n - 1].response, &chain.entries[n - 2].response);
        } else if !chain.ended_empty {
            prop_assert_eq!(n, k + 1);
        }
    }
}

fn rl_data() -> Vec<pitlab::env::PreferenceExample> {
    gen_dataset(&small_env(), 5).unwrap()
}

fn rl_cfg(beta: f64) -> RlConfig {
    RlConfig {
        beta,
        steps: 60,
        batch_size: 4,
        samples_per_prompt: 4,
        baseline: Baseline::LeaveOneOut,
        learning_rate: 1e-2,
        max_len: 5,
        log_every: 5,
        eval_every: 30,
        eval_size: 4,
        seed: 3,
        ..RlConfig::default()
    }
}

fn samples(m: &SeqModel, n: usize) -> Vec<(TokenSeq, Sample)> {
    let d = rl_data();
    let v = m.vocab();
    (0..n)
        .map(|i| {
            let ctx = format_policy_input(d[i % d.len()].task.instruction(), &v).unwrap();
            let s = m.sample(&ctx, &SamplingConfig::new(1.0, 5, 1000 + i as u64)).unwrap();
            (ctx, s)
        })
        .collect()
}

#[test]
fn kl_estimate_is_nonnegative_and_shrinks_with_beta() {
    let d = rl_data();
    let start = SeqModel::new(small_arch(), Vocab::default().hash(), 1).unwrap();
    let mut kls = Vec::new();
    for beta in [1.0, 0.01] {
        let out = rl_policy(&start, RewardSource::Oracle { lambda: 0.5 }, &d, &d[..4], &rl_cfg(beta)).unwrap();
        let kl = sequence_kl(&out.final_model, &start, &samples(&out.final_model, 1000)).unwrap();
        assert!(kl >= -0.05, "beta {beta}: {kl}");
        kls.push(kl);
    }
    assert!(kls[0] < kls[1], "KL with beta 1.0 ({}) !< with beta 0.01 ({})", kls[0], kls[1]);
}

#[test]
fn policy_rl_raises_the_reward_it_optimizes() {
    let d = rl_data();
    let start = SeqModel::new(small_arch(), Vocab::default().hash(), 2).unwrap();
    // a fresh head is zero; random weights give a reward that varies by response
    let n = RewardModel::param_count_for(&small_arch());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let rm = RewardModel::from_params(RewardKind::Policy, small_arch(), Vocab::default().hash(), params).unwrap();
    let out = rl_policy(&start, RewardSource::Model(&rm), &d, &d[..4], &rl_cfg(0.01)).unwrap();
    let mean_reward = |m: &SeqModel| -> f64 {
        let s = samples(m, 400);
        s.iter()
            .zip(d.iter().cycle())
            .map(|((_, y), ex)| rm.reward(ex.task.instruction(), &y.tokens).unwrap())
            .sum::<f64>()
            / s.len() as f64
    };
    let (before, after) = (mean_reward(&start), mean_reward(&out.final_model));
    assert!(after > before, "{after} !> {before}");
}

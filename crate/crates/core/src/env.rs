//! Synthetic instruction-following environment.
//!
//! A task asks for a set of required content tokens. A response is scored by
//! the ground-truth oracle `q* = clamp(coverage - lambda * junk, 0, 1)`, where
//! coverage is the fraction of required tokens present and junk is the share
//! of response positions holding non-required tokens.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::vocab::{strip_eos, Token, TokenSeq, Vocab, ASST, BOS, CAND, EOS, HUM, IMPR};

/// Upper bound on the number of required tokens a prompt may encode.
pub const MAX_REQUIRED: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub content_tokens: usize,
    pub min_required: usize,
    pub max_required: usize,
    /// Junk penalty weight in the oracle.
    pub lambda: f64,
    pub margin: f64,
    pub response_cap: usize,
    /// Largest number of junk tokens drawn for a rejected response before
    /// the margin repair loop.
    pub max_junk: usize,
    pub dataset_size: usize,
    pub validation_size: usize,
    pub eval_prompts: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            content_tokens: 32,
            min_required: 1,
            max_required: 8,
            lambda: 0.5,
            margin: 0.2,
            response_cap: 16,
            max_junk: 3,
            dataset_size: 6000,
            validation_size: 128,
            eval_prompts: 500,
        }
    }
}

impl EnvConfig {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.content_tokens)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_required < 1 || self.min_required > self.max_required {
            return Err(Error::Config(format!(
                "required-count range [{}, {}] is empty or starts below 1",
                self.min_required, self.max_required
            )));
        }
        if self.max_required > MAX_REQUIRED {
            return Err(Error::Config(format!(
                "at most {MAX_REQUIRED} required tokens fit a prompt, got {}",
                self.max_required
            )));
        }
        if self.max_required >= self.content_tokens {
            return Err(Error::Config(
                "content vocabulary must exceed the largest required set".into(),
            ));
        }
        if self.response_cap < self.max_required {
            return Err(Error::Config(
                "response cap must fit every required token".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.margin) || self.lambda < 0.0 {
            return Err(Error::Config("margin must lie in [0,1] and lambda be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub prompt: TokenSeq,
    /// Sorted, distinct.
    pub required: Vec<Token>,
}

impl TaskInstance {
    /// Rebuilds a task from a `BOS HUM r1 .. rk ASST` prompt.
    pub fn from_prompt(id: impl Into<String>, prompt: TokenSeq, vocab: &Vocab) -> Result<Self> {
        let body = match prompt.as_slice() {
            [BOS, HUM, body @ .., ASST] => body,
            _ => return Err(Error::Parse("prompt is not framed as BOS HUM .. ASST".into())),
        };
        vocab.check_content(body, "prompt")?;
        let required: BTreeSet<Token> = body.iter().copied().collect();
        if required.len() != body.len() || required.is_empty() || required.len() > MAX_REQUIRED {
            return Err(Error::Parse(
                "prompt must list between 1 and 8 distinct required tokens".into(),
            ));
        }
        Ok(TaskInstance {
            id: id.into(),
            prompt,
            required: required.into_iter().collect(),
        })
    }

    /// The bare instruction `x` (tokens between the HUM and ASST markers).
    pub fn instruction(&self) -> &[Token] {
        &self.prompt[2..self.prompt.len() - 1]
    }
}

pub fn gen_task(seed: u64, cfg: &EnvConfig) -> Result<TaskInstance> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(cfg.min_required..=cfg.max_required);
    let content: Vec<Token> = vocab.content_ids().collect();
    let picks: Vec<Token> = index::sample(&mut rng, content.len(), k)
        .into_iter()
        .map(|i| content[i])
        .collect();
    let mut prompt = Vec::with_capacity(k + 3);
    prompt.extend([BOS, HUM]);
    prompt.extend(&picks);
    prompt.push(ASST);
    let mut required = picks;
    required.sort_unstable();
    Ok(TaskInstance {
        id: format!("task-{seed:016x}"),
        prompt,
        required,
    })
}

/// Ground-truth quality of `response` for `task`.
pub fn oracle_quality(task: &TaskInstance, response: &[Token], vocab: &Vocab, lambda: f64) -> Result<f64> {
    let body = strip_eos(response);
    if let Some(t) = body.iter().find(|&&t| !vocab.is_content(t)) {
        return Err(Error::MalformedResponse(format!(
            "token {t} is not a content token"
        )));
    }
    Ok(quality_unchecked(&task.required, body, lambda))
}

pub(crate) fn quality_unchecked(required: &[Token], body: &[Token], lambda: f64) -> f64 {
    if body.is_empty() {
        return 0.0;
    }
    let covered = required.iter().filter(|r| body.contains(r)).count();
    let coverage = covered as f64 / required.len() as f64;
    let junk_positions = body.iter().filter(|t| required.binary_search(t).is_err()).count();
    let junk = junk_positions as f64 / body.len() as f64;
    (coverage - lambda * junk).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub task: TaskInstance,
    /// EOS-terminated.
    pub chosen: TokenSeq,
    /// EOS-terminated.
    pub rejected: TokenSeq,
    pub q_chosen: f64,
    pub q_rejected: f64,
}

impl PreferenceExample {
    pub fn id(&self) -> &str {
        &self.task.id
    }

    pub fn chosen_body(&self) -> &[Token] {
        strip_eos(&self.chosen)
    }

    pub fn rejected_body(&self) -> &[Token] {
        strip_eos(&self.rejected)
    }
}

const MARGIN_SLACK: f64 = 1e-12;

pub fn gen_preference_pair<R: Rng + ?Sized>(
    task: &TaskInstance,
    cfg: &EnvConfig,
    rng: &mut R,
) -> Result<PreferenceExample> {
    let vocab = cfg.vocab()?;
    let k = task.required.len();

    let mut chosen = task.required.clone();
    chosen.shuffle(rng);
    let q_chosen = quality_unchecked(&task.required, &chosen, cfg.lambda);
    chosen.push(EOS);

    let keep = rng.gen_range(0..k);
    let mut kept: Vec<Token> = task.required.choose_multiple(rng, keep).copied().collect();
    let junk_pool: Vec<Token> = vocab
        .content_ids()
        .filter(|t| task.required.binary_search(t).is_err())
        .collect();
    let mut n_junk = rng.gen_range(0..=cfg.max_junk).min(cfg.response_cap - kept.len());
    if kept.is_empty() {
        // the improver layout needs a non-empty candidate
        n_junk = n_junk.max(1);
    }
    let mut junk: Vec<Token> = (0..n_junk)
        .map(|_| *junk_pool.choose(rng).expect("junk pool is non-empty"))
        .collect();

    let ceiling = q_chosen - cfg.margin + MARGIN_SLACK;
    loop {
        let mut body: Vec<Token> = kept.iter().chain(&junk).copied().collect();
        body.shuffle(rng);
        let q = quality_unchecked(&task.required, &body, cfg.lambda);
        if q <= ceiling {
            body.push(EOS);
            return Ok(PreferenceExample {
                task: task.clone(),
                chosen,
                rejected: body,
                q_chosen,
                q_rejected: q,
            });
        }
        if kept.len() + junk.len() < cfg.response_cap {
            junk.push(*junk_pool.choose(rng).expect("junk pool is non-empty"));
        } else if !kept.is_empty() {
            kept.pop();
        } else {
            return Err(Error::Generation(format!(
                "cannot reach margin {} for task {} within length cap {}",
                cfg.margin, task.id, cfg.response_cap
            )));
        }
    }
}

/// Generates `cfg.dataset_size` preference examples in seed order.
pub fn gen_dataset(cfg: &EnvConfig, root_seed: u64) -> Result<Vec<PreferenceExample>> {
    cfg.validate()?;
    (0..cfg.dataset_size)
        .map(|i| {
            let task = gen_task(derive_seed(root_seed, &format!("data/task/{i}")), cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(root_seed, &format!("data/pair/{i}")));
            gen_preference_pair(&task, cfg, &mut rng)
        })
        .collect()
}

/// Fresh prompts for evaluation, disjoint in seed stream from the training data.
pub fn gen_eval_tasks(cfg: &EnvConfig, root_seed: u64, n: usize) -> Result<Vec<TaskInstance>> {
    (0..n)
        .map(|i| gen_task(derive_seed(root_seed, &format!("eval/task/{i}")), cfg))
        .collect()
}

/// A response of unconstrained quality: a uniformly sized subset of the
/// required tokens mixed with up to `max_junk` junk tokens. Never empty.
pub fn noisy_response<R: Rng + ?Sized>(task: &TaskInstance, cfg: &EnvConfig, rng: &mut R) -> Result<TokenSeq> {
    let vocab = cfg.vocab()?;
    let k = task.required.len();
    let keep = rng.gen_range(0..=k);
    let mut body: Vec<Token> = task.required.choose_multiple(rng, keep).copied().collect();
    let junk_pool: Vec<Token> = vocab
        .content_ids()
        .filter(|t| task.required.binary_search(t).is_err())
        .collect();
    let n_junk = rng.gen_range(0..=cfg.max_junk).min(cfg.response_cap - body.len());
    let n_junk = if body.is_empty() { n_junk.max(1) } else { n_junk };
    for _ in 0..n_junk {
        body.push(*junk_pool.choose(rng).expect("junk pool is non-empty"));
    }
    body.shuffle(rng);
    Ok(body)
}

/// Unlabeled corpus for next-token pretraining over fresh tasks. Half the
/// sequences use the policy layout, half the improver layout; every response
/// is an independent [`noisy_response`], so the corpus carries the framing
/// and the prompt-copying structure but no preference signal.
pub fn gen_pretrain_corpus(cfg: &EnvConfig, root_seed: u64, n: usize) -> Result<Vec<TokenSeq>> {
    cfg.validate()?;
    (0..n)
        .map(|i| {
            let task = gen_task(derive_seed(root_seed, &format!("pretrain/task/{i}")), cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(root_seed, &format!("pretrain/seq/{i}")));
            let mut seq = task.prompt.clone();
            if rng.gen_bool(0.5) {
                seq.push(CAND);
                seq.extend(noisy_response(&task, cfg, &mut rng)?);
                seq.push(IMPR);
            }
            seq.extend(noisy_response(&task, cfg, &mut rng)?);
            seq.push(EOS);
            Ok(seq)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Sft,
    Rm,
    Rl,
    Val,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetFolds {
    pub sft: Vec<PreferenceExample>,
    pub rm: Vec<PreferenceExample>,
    pub rl: Vec<PreferenceExample>,
    pub validation: Vec<PreferenceExample>,
}

impl DatasetFolds {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.sft.len(), self.rm.len(), self.rl.len())
    }

    pub fn iter_labeled(&self) -> impl Iterator<Item = (Fold, &PreferenceExample)> {
        self.sft
            .iter()
            .map(|e| (Fold::Sft, e))
            .chain(self.rm.iter().map(|e| (Fold::Rm, e)))
            .chain(self.rl.iter().map(|e| (Fold::Rl, e)))
            .chain(self.validation.iter().map(|e| (Fold::Val, e)))
    }
}

/// Shuffles by `seed`, reserves the validation slice, then splits the rest
/// floor(N/3) / floor(N/3) / remainder.
pub fn split_folds(
    dataset: Vec<PreferenceExample>,
    validation_size: usize,
    seed: u64,
) -> Result<DatasetFolds> {
    if dataset.len() < validation_size + 3 {
        return Err(Error::InvalidInput(format!(
            "dataset of {} examples cannot hold {} validation examples and three non-empty folds",
            dataset.len(),
            validation_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = dataset;
    all.shuffle(&mut rng);
    let rest = all.split_off(validation_size);
    let validation = all;
    let n = rest.len();
    let third = n / 3;
    let mut it = rest.into_iter();
    let sft: Vec<_> = it.by_ref().take(third).collect();
    let rm: Vec<_> = it.by_ref().take(third).collect();
    let rl: Vec<_> = it.collect();
    Ok(DatasetFolds {
        sft,
        rm,
        rl,
        validation,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetRecord {
    id: String,
    prompt: TokenSeq,
    chosen: TokenSeq,
    rejected: TokenSeq,
    q_chosen: f64,
    q_rejected: f64,
    fold: Fold,
}

pub fn write_folds_jsonl<W: Write>(folds: &DatasetFolds, mut w: W) -> Result<()> {
    for (fold, ex) in folds.iter_labeled() {
        let rec = DatasetRecord {
            id: ex.task.id.clone(),
            prompt: ex.task.prompt.clone(),
            chosen: ex.chosen.clone(),
            rejected: ex.rejected.clone(),
            q_chosen: ex.q_chosen,
            q_rejected: ex.q_rejected,
            fold,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io("<dataset>", e))?;
    }
    Ok(())
}

pub fn read_folds_jsonl<R: BufRead>(r: R, vocab: &Vocab) -> Result<DatasetFolds> {
    let mut folds = DatasetFolds::default();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("dataset line {}: {e}", lineno + 1)))?;
        let task = TaskInstance::from_prompt(rec.id, rec.prompt, vocab)?;
        let ex = PreferenceExample {
            task,
            chosen: rec.chosen,
            rejected: rec.rejected,
            q_chosen: rec.q_chosen,
            q_rejected: rec.q_rejected,
        };
        match rec.fold {
            Fold::Sft => folds.sft.push(ex),
            Fold::Rm => folds.rm.push(ex),
            Fold::Rl => folds.rl.push(ex),
            Fold::Val => folds.validation.push(ex),
        }
    }
    Ok(folds)
}

pub fn load_folds(path: &Path, vocab: &Vocab) -> Result<DatasetFolds> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_folds_jsonl(std::io::BufReader::new(f), vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task_with(required: &[Token]) -> TaskInstance {
        let mut prompt = vec![BOS, HUM];
        prompt.extend(required);
        prompt.push(ASST);
        TaskInstance::from_prompt("t", prompt, &Vocab::default()).unwrap()
    }

    #[test]
    fn gen_task_is_deterministic() {
        let cfg = EnvConfig::default();
        assert_eq!(gen_task(7, &cfg).unwrap(), gen_task(7, &cfg).unwrap());
    }

    #[test]
    fn gen_task_respects_required_bounds() {
        let cfg = EnvConfig::default();
        let vocab = cfg.vocab().unwrap();
        for seed in 0..1000 {
            let t = gen_task(seed, &cfg).unwrap();
            assert!((1..=8).contains(&t.required.len()));
            let body = t.instruction();
            assert_eq!(body.len(), t.required.len());
            for r in &t.required {
                assert_eq!(body.iter().filter(|&&b| b == *r).count(), 1);
            }
            assert_eq!(TaskInstance::from_prompt(t.id.clone(), t.prompt.clone(), &vocab).unwrap(), t);
        }
    }

    #[test]
    fn gen_task_rejects_oversized_required_range() {
        let cfg = EnvConfig {
            min_required: 9,
            max_required: 9,
            ..EnvConfig::default()
        };
        assert!(matches!(gen_task(1, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn oracle_examples() {
        let v = Vocab::default();
        let t = task_with(&[6, 7, 8, 9]);
        assert_eq!(oracle_quality(&t, &[9, 7, 6, 8], &v, 0.5).unwrap(), 1.0);
        assert_eq!(oracle_quality(&t, &[9, 7, 6, 8, EOS], &v, 0.5).unwrap(), 1.0);
        assert_eq!(oracle_quality(&t, &[], &v, 0.5).unwrap(), 0.0);
        assert_eq!(oracle_quality(&t, &[6, 20, 7, 21], &v, 0.5).unwrap(), 0.25);
        // duplicates of required tokens are not junk
        assert_eq!(oracle_quality(&t, &[6, 6, 7, 8, 9], &v, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn oracle_rejects_reserved_tokens() {
        let v = Vocab::default();
        let t = task_with(&[6, 7]);
        assert!(matches!(
            oracle_quality(&t, &[6, HUM, 7], &v, 0.5),
            Err(Error::MalformedResponse(_))
        ));
        assert!(matches!(
            oracle_quality(&t, &[6, EOS, 7], &v, 0.5),
            Err(Error::MalformedResponse(_))
        ));
    }

    #[test]
    fn preference_pair_contract() {
        let cfg = EnvConfig::default();
        let v = cfg.vocab().unwrap();
        let t = task_with(&[10, 11, 12]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = gen_preference_pair(&t, &cfg, &mut rng).unwrap();
        let mut c = ex.chosen_body().to_vec();
        c.sort();
        assert_eq!(c, t.required);
        let covered: BTreeSet<_> = ex
            .rejected_body()
            .iter()
            .filter(|x| t.required.contains(x))
            .collect();
        assert!(covered.len() < t.required.len());
        assert!(!ex.rejected_body().is_empty());
        assert_eq!(*ex.chosen.last().unwrap(), EOS);
        assert_eq!(*ex.rejected.last().unwrap(), EOS);
        assert_eq!(oracle_quality(&t, &ex.rejected, &v, 0.5).unwrap(), ex.q_rejected);

        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(gen_preference_pair(&t, &cfg, &mut rng2).unwrap(), ex);
    }

    #[test]
    fn split_sizes_follow_remainder_rule() {
        let cfg = EnvConfig {
            dataset_size: 10,
            ..EnvConfig::default()
        };
        let data = gen_dataset(&cfg, 1).unwrap();
        let folds = split_folds(data[..9].to_vec(), 0, 5).unwrap();
        assert_eq!(folds.sizes(), (3, 3, 3));
        let folds = split_folds(data.clone(), 0, 5).unwrap();
        assert_eq!(folds.sizes(), (3, 3, 4));
        assert!(split_folds(data[..2].to_vec(), 0, 5).is_err());
        assert!(split_folds(data.clone(), 8, 5).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = EnvConfig {
            dataset_size: 20,
            validation_size: 4,
            ..EnvConfig::default()
        };
        let folds = split_folds(gen_dataset(&cfg, 9).unwrap(), 4, 2).unwrap();
        let mut buf = Vec::new();
        write_folds_jsonl(&folds, &mut buf).unwrap();
        let back = read_folds_jsonl(buf.as_slice(), &cfg.vocab().unwrap()).unwrap();
        assert_eq!(back, folds);
        let first = std::str::from_utf8(&buf).unwrap().lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        for key in ["id", "prompt", "chosen", "rejected", "q_chosen", "q_rejected", "fold"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}

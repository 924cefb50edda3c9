//! Iterative self-improvement at inference time: `y_{k+1} ~ PIT(. | x, y_k)`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::env::{quality_unchecked, TaskInstance};
use crate::error::{Error, Result};
use crate::format::{format_pit_input, format_policy_input};
use crate::model::{Sample, SamplingConfig, SeqModel};
use crate::seed::derive_seed;
use crate::vocab::{Token, TokenSeq};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImproveConfig {
    /// Number of improver passes K.
    pub iterations: usize,
    /// Improver sampling temperature.
    pub temperature: f64,
    /// Temperature of the policy sample that seeds a chain.
    pub reference_temperature: f64,
    pub max_len: usize,
    pub stop_on_fixpoint: bool,
    pub oracle_lambda: f64,
    pub seed: u64,
}

impl Default for ImproveConfig {
    fn default() -> Self {
        ImproveConfig {
            iterations: 5,
            temperature: 0.4,
            reference_temperature: 1.0,
            max_len: 16,
            stop_on_fixpoint: false,
            oracle_lambda: 0.5,
            seed: 0,
        }
    }
}

impl ImproveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !(self.reference_temperature >= 0.0) {
            return Err(Error::Config("temperatures must be >= 0".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Generation passes spent, for the cost contract.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenerationCounter {
    pub improver: usize,
    pub policy: usize,
}

/// One improver pass over `format_pit_input(x, y_ref)`.
pub fn improve_once(
    pit: &SeqModel,
    x: &[Token],
    y_ref: &[Token],
    temperature: f64,
    max_len: usize,
    seed: u64,
    counter: &mut GenerationCounter,
) -> Result<Sample> {
    let ctx = format_pit_input(x, y_ref, &pit.vocab())?;
    let out = pit.sample(&ctx, &SamplingConfig::new(temperature, max_len, seed))?;
    counter.improver += 1;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainEntry {
    pub iteration: usize,
    pub response: TokenSeq,
    pub truncated: bool,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementChain {
    pub id: String,
    /// `entries[0]` is the reference `y_0`.
    pub entries: Vec<ChainEntry>,
    /// Iteration that reproduced its input, when the fix-point stop fired.
    pub stop_index: Option<usize>,
    /// Set when an empty response ended the chain early.
    pub ended_empty: bool,
    pub temperature: f64,
}

impl ImprovementChain {
    pub fn responses(&self) -> impl Iterator<Item = &TokenSeq> {
        self.entries.iter().map(|e| &e.response)
    }

    /// Response after `k` improver passes, if the chain got that far.
    pub fn at(&self, k: usize) -> Option<&TokenSeq> {
        self.entries.get(k).map(|e| &e.response)
    }
}

/// Runs up to `cfg.iterations` improver passes. `y0` defaults to a fresh
/// policy sample at the reference temperature.
pub fn improve_chain(
    pit: &SeqModel,
    policy: &SeqModel,
    task: &TaskInstance,
    y0: Option<TokenSeq>,
    cfg: &ImproveConfig,
    counter: &mut GenerationCounter,
) -> Result<ImprovementChain> {
    cfg.validate()?;
    let x = task.instruction();
    let entry = |iteration: usize, s: &Sample| ChainEntry {
        iteration,
        response: s.tokens.clone(),
        truncated: s.truncated(),
        quality: quality_unchecked(&task.required, &s.tokens, cfg.oracle_lambda),
    };
    let first = match y0 {
        Some(tokens) => Sample {
            tokens,
            terminated: true,
        },
        None => {
            let ctx = format_policy_input(x, &policy.vocab())?;
            let seed = derive_seed(cfg.seed, &format!("chain/{}/ref", task.id));
            let s = policy.sample(&ctx, &SamplingConfig::new(cfg.reference_temperature, cfg.max_len, seed))?;
            counter.policy += 1;
            s
        }
    };
    let mut chain = ImprovementChain {
        id: task.id.clone(),
        entries: vec![entry(0, &first)],
        stop_index: None,
        ended_empty: false,
        temperature: cfg.temperature,
    };
    for k in 1..=cfg.iterations {
        let prev = chain.entries.last().expect("chain starts non-empty").response.clone();
        if prev.is_empty() {
            chain.ended_empty = true;
            break;
        }
        let seed = derive_seed(cfg.seed, &format!("chain/{}/{k}", task.id));
        let s = improve_once(pit, x, &prev, cfg.temperature, cfg.max_len, seed, counter)?;
        let fixed = s.tokens == prev;
        chain.entries.push(entry(k, &s));
        if fixed && cfg.stop_on_fixpoint {
            chain.stop_index = Some(k);
            break;
        }
    }
    Ok(chain)
}

#[derive(Debug, Serialize, Deserialize)]
struct ChainRecord {
    id: String,
    responses: Vec<TokenSeq>,
    qualities: Vec<f64>,
    truncated: Vec<bool>,
    stop_index: Option<usize>,
    ended_empty: bool,
    temperature: f64,
}

pub fn write_chains_jsonl<W: Write>(chains: &[ImprovementChain], mut w: W) -> Result<()> {
    for c in chains {
        let rec = ChainRecord {
            id: c.id.clone(),
            responses: c.entries.iter().map(|e| e.response.clone()).collect(),
            qualities: c.entries.iter().map(|e| e.quality).collect(),
            truncated: c.entries.iter().map(|e| e.truncated).collect(),
            stop_index: c.stop_index,
            ended_empty: c.ended_empty,
            temperature: c.temperature,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io("chains", e))?;
    }
    Ok(())
}

pub fn read_chains_jsonl<R: BufRead>(r: R) -> Result<Vec<ImprovementChain>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("chains", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ChainRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("chain line {}: {e}", n + 1)))?;
        if rec.responses.len() != rec.qualities.len() || rec.responses.len() != rec.truncated.len() {
            return Err(Error::Parse(format!("chain line {}: ragged fields", n + 1)));
        }
        let entries = rec
            .responses
            .into_iter()
            .zip(rec.qualities)
            .zip(rec.truncated)
            .enumerate()
            .map(|(iteration, ((response, quality), truncated))| ChainEntry {
                iteration,
                response,
                truncated,
                quality,
            })
            .collect();
        out.push(ImprovementChain {
            id: rec.id,
            entries,
            stop_index: rec.stop_index,
            ended_empty: rec.ended_empty,
            temperature: rec.temperature,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{gen_task, EnvConfig};
    use crate::model::tests::{scripted_model, tiny_arch};
    use crate::vocab::Vocab;

    fn task() -> TaskInstance {
        let cfg = EnvConfig {
            max_required: 3,
            ..EnvConfig::default()
        };
        gen_task(4, &cfg).unwrap()
    }

    fn model(seed: u64) -> SeqModel {
        SeqModel::new(tiny_arch(), Vocab::default().hash(), seed).unwrap()
    }

    fn cfg(k: usize) -> ImproveConfig {
        ImproveConfig {
            iterations: k,
            max_len: 4,
            seed: 2,
            ..ImproveConfig::default()
        }
    }

    fn constant_model(t: Token) -> SeqModel {
        scripted_model(t)
    }

    #[test]
    fn improve_once_is_deterministic_and_counts_one_pass() {
        let t = task();
        let m = model(3);
        let mut c = GenerationCounter::default();
        let a = improve_once(&m, t.instruction(), &t.required, 1.0, 4, 9, &mut c).unwrap();
        let b = improve_once(&m, t.instruction(), &t.required, 1.0, 4, 9, &mut c).unwrap();
        assert_eq!(a, b);
        assert_eq!(c, GenerationCounter { improver: 2, policy: 0 });
        assert!(improve_once(&m, t.instruction(), &[], 1.0, 4, 9, &mut c).is_err());
        assert_eq!(c.improver, 2);
        assert!(matches!(improve_once(&m, t.instruction(), &[7; 14], 1.0, 4, 9, &mut c), Err(Error::Overlength { .. })));
    }

    #[test]
    fn greedy_improvement_of_its_own_output_repeats() {
        let t = task();
        let m = model(3);
        let mut c = GenerationCounter::default();
        let y1 = improve_once(&m, t.instruction(), &t.required, 0.0, 4, 1, &mut c).unwrap();
        if y1.tokens.is_empty() {
            return;
        }
        let y2 = improve_once(&m, t.instruction(), &y1.tokens, 0.0, 4, 2, &mut c).unwrap();
        let y2b = improve_once(&m, t.instruction(), &y1.tokens, 0.0, 4, 3, &mut c).unwrap();
        assert_eq!(y2, y2b);
    }

    #[test]
    fn chain_lengths_follow_the_iteration_count() {
        let t = task();
        let pit = constant_model(9);
        let policy = constant_model(8);
        for k in [0, 1, 5] {
            let mut c = GenerationCounter::default();
            let chain = improve_chain(&pit, &policy, &t, None, &cfg(k), &mut c).unwrap();
            assert_eq!(chain.entries.len(), k + 1);
            assert_eq!(c, GenerationCounter { improver: k, policy: 1 });
            assert_eq!(chain.at(0).unwrap(), &vec![8]);
            assert!(chain.stop_index.is_none());
            assert!(chain.entries.iter().all(|e| (0.0..=1.0).contains(&e.quality)));
        }
    }

    #[test]
    fn fixpoint_stop_fires_when_the_input_is_reproduced() {
        let t = task();
        let pit = constant_model(9);
        let policy = constant_model(9);
        let mut c = GenerationCounter::default();
        let chain = improve_chain(&pit, &policy, &t, None, &ImproveConfig { stop_on_fixpoint: true, ..cfg(5) }, &mut c)
            .unwrap();
        assert_eq!(chain.entries.len(), 2);
        assert_eq!(chain.stop_index, Some(1));
        let n = chain.entries.len();
        assert_eq!(chain.entries[n - 1].response, chain.entries[n - 2].response);
        assert_eq!(c.improver, 1);
    }

    #[test]
    fn supplied_reference_skips_the_policy_and_empty_ends_the_chain() {
        let t = task();
        let pit = constant_model(9);
        let mut c = GenerationCounter::default();
        let chain = improve_chain(&pit, &pit, &t, Some(vec![7, 7]), &cfg(2), &mut c).unwrap();
        assert_eq!(c.policy, 0);
        assert_eq!(chain.at(0).unwrap(), &vec![7, 7]);

        let chain = improve_chain(&pit, &pit, &t, Some(vec![]), &cfg(3), &mut c).unwrap();
        assert!(chain.ended_empty);
        assert_eq!(chain.entries.len(), 1);
    }

    #[test]
    fn chains_round_trip_through_jsonl() {
        let t = task();
        let mut c = GenerationCounter::default();
        let chain = improve_chain(&model(3), &model(4), &t, None, &cfg(3), &mut c).unwrap();
        let mut buf = Vec::new();
        write_chains_jsonl(std::slice::from_ref(&chain), &mut buf).unwrap();
        let line: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        for key in ["id", "responses", "qualities", "stop_index", "temperature"] {
            assert!(line.get(key).is_some(), "{key}");
        }
        let back = read_chains_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, vec![chain]);
        assert!(read_chains_jsonl("{\"id\":1}\n".as_bytes()).is_err());
    }
}

//! Pairwise verdicts, Δ reports, ELO, agreement and reward diagnostics.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{quality_unchecked, PreferenceExample, TaskInstance};
use crate::error::{Error, Result};
use crate::format::format_policy_input;
use crate::improve::{improve_once, GenerationCounter};
use crate::model::{Sample, SamplingConfig, SeqModel};
use crate::reward::{gap_by_subtraction, judge, sigmoid, RewardKind, RewardModel, TieBand, Verdict};
use crate::seed::derive_seed;
use crate::train::MetricsRow;
use crate::vocab::{Token, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    Oracle,
    RewardPolicy,
    RewardGap,
    GapBySubtraction,
}

impl EvaluatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EvaluatorKind::Oracle => "oracle",
            EvaluatorKind::RewardPolicy => "reward_policy",
            EvaluatorKind::RewardGap => "reward_gap",
            EvaluatorKind::GapBySubtraction => "gap_by_subtraction",
        }
    }
}

impl std::fmt::Display for EvaluatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A judge over `(x, y_a, y_b)`.
#[derive(Debug, Clone, Copy)]
pub enum Evaluator<'a> {
    /// Band rule on the oracle quality difference.
    Oracle { lambda: f64 },
    /// Band rule on `r(a) - r(b)`.
    RewardPolicy(&'a RewardModel),
    /// Band rule on `g(a, b) - g(b, a)`; both orders are scored so the
    /// verdict is antisymmetric and independent of the head's offset.
    RewardGap(&'a RewardModel),
    /// Band rule on the subtraction estimate `r(a) - r(b)` against zero.
    GapBySubtraction(&'a RewardModel),
}

impl<'a> Evaluator<'a> {
    pub fn kind(&self) -> EvaluatorKind {
        match self {
            Evaluator::Oracle { .. } => EvaluatorKind::Oracle,
            Evaluator::RewardPolicy(_) => EvaluatorKind::RewardPolicy,
            Evaluator::RewardGap(_) => EvaluatorKind::RewardGap,
            Evaluator::GapBySubtraction(_) => EvaluatorKind::GapBySubtraction,
        }
    }

    /// Checks the reward model kind each variant expects.
    pub fn reward_gap(m: &'a RewardModel) -> Result<Self> {
        expect_kind(m, RewardKind::Gap)?;
        Ok(Evaluator::RewardGap(m))
    }

    pub fn reward_policy(m: &'a RewardModel) -> Result<Self> {
        expect_kind(m, RewardKind::Policy)?;
        Ok(Evaluator::RewardPolicy(m))
    }

    pub fn gap_by_subtraction(m: &'a RewardModel) -> Result<Self> {
        expect_kind(m, RewardKind::Policy)?;
        Ok(Evaluator::GapBySubtraction(m))
    }

    pub fn verdict(&self, task: &TaskInstance, a: &[Token], b: &[Token], band: TieBand) -> Result<Verdict> {
        let x = task.instruction();
        Ok(match *self {
            Evaluator::Oracle { lambda } => judge(
                quality_unchecked(&task.required, a, lambda),
                quality_unchecked(&task.required, b, lambda),
                band,
            ),
            Evaluator::RewardPolicy(m) => judge(m.reward(x, a)?, m.reward(x, b)?, band),
            Evaluator::RewardGap(m) => judge(m.reward_gap(x, a, b)?, m.reward_gap(x, b, a)?, band),
            Evaluator::GapBySubtraction(m) => judge(gap_by_subtraction(m, x, a, b)?, 0.0, band),
        })
    }
}

fn expect_kind(m: &RewardModel, kind: RewardKind) -> Result<()> {
    if m.kind != kind {
        return Err(Error::InvalidInput(format!("expected a {kind:?} reward model, got {:?}", m.kind)));
    }
    Ok(())
}

/// One comparison of `a` against `b` on a task.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub task: &'a TaskInstance,
    pub a: &'a [Token],
    pub b: &'a [Token],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method_a: String,
    pub method_b: String,
    pub win: usize,
    pub lose: usize,
    pub tie: usize,
    pub total: usize,
    pub delta: f64,
    pub evaluator: EvaluatorKind,
    pub temperature: Option<f64>,
}

impl EvalReport {
    pub fn from_verdicts(verdicts: &[Verdict], evaluator: EvaluatorKind) -> Result<Self> {
        if verdicts.is_empty() {
            return Err(Error::Empty("comparison set"));
        }
        let count = |v: Verdict| verdicts.iter().filter(|&&x| x == v).count();
        let (win, lose, tie) = (count(Verdict::Win), count(Verdict::Lose), count(Verdict::Tie));
        let total = verdicts.len();
        Ok(EvalReport {
            method_a: String::new(),
            method_b: String::new(),
            win,
            lose,
            tie,
            total,
            delta: (win as f64 - lose as f64) / total as f64,
            evaluator,
            temperature: None,
        })
    }

    pub fn labeled(mut self, method_a: &str, method_b: &str) -> Self {
        self.method_a = method_a.to_string();
        self.method_b = method_b.to_string();
        self
    }

    pub fn at_temperature(mut self, t: f64) -> Self {
        self.temperature = Some(t);
        self
    }
}

pub fn verdicts(evaluator: &Evaluator<'_>, pairs: &[Pair<'_>], band: TieBand) -> Result<Vec<Verdict>> {
    pairs.iter().map(|p| evaluator.verdict(p.task, p.a, p.b, band)).collect()
}

pub fn compare_batch(evaluator: &Evaluator<'_>, pairs: &[Pair<'_>], band: TieBand) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("comparison set"));
    }
    EvalReport::from_verdicts(&verdicts(evaluator, pairs, band)?, evaluator.kind())
}

pub fn write_reports_csv<W: Write>(reports: &[EvalReport], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["method_a", "method_b", "win", "lose", "tie", "delta", "evaluator", "temperature"])?;
    for r in reports {
        wtr.write_record([
            r.method_a.clone(),
            r.method_b.clone(),
            r.win.to_string(),
            r.lose.to_string(),
            r.tie.to_string(),
            format!("{:.6}", r.delta),
            r.evaluator.to_string(),
            r.temperature.map(|t| t.to_string()).unwrap_or_default(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<reports>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub task_id: String,
    pub method_a: String,
    pub method_b: String,
    pub verdict: Verdict,
    pub evaluator: EvaluatorKind,
}

/// All `C(M, 2)` comparisons among `methods` on one task, in list order.
pub fn round_robin(
    evaluator: &Evaluator<'_>,
    task: &TaskInstance,
    methods: &[(&str, &[Token])],
    band: TieBand,
) -> Result<Vec<ComparisonRecord>> {
    let mut out = Vec::with_capacity(methods.len() * methods.len().saturating_sub(1) / 2);
    for (i, (ma, ya)) in methods.iter().enumerate() {
        for (mb, yb) in &methods[i + 1..] {
            out.push(ComparisonRecord {
                task_id: task.id.clone(),
                method_a: ma.to_string(),
                method_b: mb.to_string(),
                verdict: evaluator.verdict(task, ya, yb, band)?,
                evaluator: evaluator.kind(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EloConfig {
    pub k_factor: f64,
    pub scale: f64,
    pub initial: f64,
}

impl Default for EloConfig {
    fn default() -> Self {
        EloConfig {
            k_factor: 4.0,
            scale: 400.0,
            initial: 1000.0,
        }
    }
}

impl EloConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_factor > 0.0) || !(self.scale > 0.0) || !self.initial.is_finite() {
            return Err(Error::Config("elo needs k_factor > 0, scale > 0 and a finite initial rating".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloEntry {
    pub method: String,
    pub rating: f64,
    /// 1 is best.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloTable {
    /// Sorted by rank.
    pub entries: Vec<EloEntry>,
    pub config: EloConfig,
}

impl EloTable {
    pub fn get(&self, method: &str) -> Option<&EloEntry> {
        self.entries.iter().find(|e| e.method == method)
    }

    pub fn rating_sum(&self) -> f64 {
        self.entries.iter().map(|e| e.rating).sum()
    }
}

/// Rating updates are snapped to multiples of 2^-20 so that ratings stay
/// exactly representable and the total is conserved bit for bit.
const ELO_QUANTUM: f64 = 1_048_576.0;

pub fn elo(methods: &[&str], comparisons: &[ComparisonRecord], cfg: &EloConfig) -> Result<EloTable> {
    cfg.validate()?;
    let mut ratings: BTreeMap<&str, f64> = BTreeMap::new();
    for m in methods {
        if ratings.insert(m, cfg.initial).is_some() {
            return Err(Error::InvalidInput(format!("method `{m}` registered twice")));
        }
    }
    for c in comparisons {
        let ra = *ratings
            .get(c.method_a.as_str())
            .ok_or_else(|| Error::UnregisteredMethod(c.method_a.clone()))?;
        let rb = *ratings
            .get(c.method_b.as_str())
            .ok_or_else(|| Error::UnregisteredMethod(c.method_b.clone()))?;
        let expected = 1.0 / (1.0 + 10f64.powf((rb - ra) / cfg.scale));
        let score = match c.verdict {
            Verdict::Win => 1.0,
            Verdict::Lose => 0.0,
            Verdict::Tie => 0.5,
        };
        let d = (cfg.k_factor * (score - expected) * ELO_QUANTUM).round() / ELO_QUANTUM;
        *ratings.get_mut(c.method_a.as_str()).expect("checked") += d;
        *ratings.get_mut(c.method_b.as_str()).expect("checked") -= d;
    }
    // BTreeMap iteration is label order, which breaks rating ties.
    let mut entries: Vec<EloEntry> = ratings
        .into_iter()
        .map(|(m, r)| EloEntry {
            method: m.to_string(),
            rating: r,
            rank: 0,
        })
        .collect();
    entries.sort_by(|a, b| b.rating.total_cmp(&a.rating));
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    Ok(EloTable { entries, config: *cfg })
}

pub fn write_elo_csv<W: Write>(table: &EloTable, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["method", "rating", "rank"])?;
    for e in &table.entries {
        wtr.write_record([e.method.clone(), format!("{:.6}", e.rating), e.rank.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io("<elo>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRange {
    pub method: String,
    pub best: usize,
    pub worst: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleSummary {
    pub tables: Vec<EloTable>,
    pub ranges: Vec<RankRange>,
    pub rating_sums: Vec<f64>,
    /// Method ranked first under every ordering, if any.
    pub stable_top: Option<String>,
    /// Method ranked last under every ordering, if any.
    pub stable_bottom: Option<String>,
}

pub fn shuffle_stability(
    methods: &[&str],
    comparisons: &[ComparisonRecord],
    n_shuffles: usize,
    seed: u64,
    cfg: &EloConfig,
) -> Result<ShuffleSummary> {
    if n_shuffles < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 shuffles, got {n_shuffles}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<ComparisonRecord> = comparisons.to_vec();
    let mut tables = Vec::with_capacity(n_shuffles);
    for _ in 0..n_shuffles {
        order.shuffle(&mut rng);
        tables.push(elo(methods, &order, cfg)?);
    }
    let mut labels: Vec<&str> = methods.to_vec();
    labels.sort_unstable();
    let ranges = labels
        .iter()
        .map(|m| {
            let ranks: Vec<usize> = tables.iter().map(|t| t.get(m).expect("registered").rank).collect();
            RankRange {
                method: m.to_string(),
                best: *ranks.iter().min().expect("n_shuffles >= 2"),
                worst: *ranks.iter().max().expect("n_shuffles >= 2"),
            }
        })
        .collect();
    let invariant = |pick: fn(&EloTable) -> Option<&EloEntry>| {
        let first = pick(&tables[0])?.method.clone();
        tables
            .iter()
            .all(|t| pick(t).map(|e| e.method == first).unwrap_or(false))
            .then_some(first)
    };
    Ok(ShuffleSummary {
        rating_sums: tables.iter().map(EloTable::rating_sum).collect(),
        stable_top: invariant(|t| t.entries.first()),
        stable_bottom: invariant(|t| t.entries.last()),
        ranges,
        tables,
    })
}

/// Fraction of examples where the judge prefers the chosen response.
/// Ties count as disagreement.
pub fn agreement(evaluator: &Evaluator<'_>, examples: &[PreferenceExample], band: TieBand) -> Result<f64> {
    agreement_with(examples, |ex| {
        evaluator.verdict(&ex.task, ex.chosen_body(), ex.rejected_body(), band)
    })
}

pub fn agreement_with<F>(examples: &[PreferenceExample], mut judge_fn: F) -> Result<f64>
where
    F: FnMut(&PreferenceExample) -> Result<Verdict>,
{
    if examples.is_empty() {
        return Err(Error::Empty("agreement set"));
    }
    let mut hits = 0usize;
    for ex in examples {
        if judge_fn(ex)? == Verdict::Win {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairType {
    /// `g(y_w, y_l)`
    Wl,
    Ww,
    Ll,
    Lw,
    /// `g(y, y)` for a policy sample `y`.
    Yy,
}

impl PairType {
    pub const ALL: [PairType; 5] = [PairType::Wl, PairType::Ww, PairType::Ll, PairType::Lw, PairType::Yy];

    pub fn as_str(self) -> &'static str {
        match self {
            PairType::Wl => "wl",
            PairType::Ww => "ww",
            PairType::Ll => "ll",
            PairType::Lw => "lw",
            PairType::Yy => "yy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl SeriesStats {
    fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        SeriesStats {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            min: v.first().copied().unwrap_or(f64::NAN),
            max: v.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardHistogram {
    pub series: BTreeMap<PairType, Vec<f64>>,
}

impl RewardHistogram {
    pub fn values(&self, t: PairType) -> &[f64] {
        self.series.get(&t).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn stats(&self, t: PairType) -> SeriesStats {
        SeriesStats::of(self.values(t))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["pair_type", "value"])?;
        for t in PairType::ALL {
            for v in self.values(t) {
                wtr.write_record([t.as_str().to_string(), format!("{v:.9}")])?;
            }
        }
        wtr.flush().map_err(|e| Error::io("<histogram>", e))?;
        Ok(())
    }
}

/// Raw gap rewards for the four dataset pair types plus identical policy
/// samples. Empty policy samples are scored as they are.
pub fn reward_histogram(
    gap: &RewardModel,
    examples: &[PreferenceExample],
    policy: &SeqModel,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<RewardHistogram> {
    expect_kind(gap, RewardKind::Gap)?;
    if examples.is_empty() {
        return Err(Error::Empty("histogram dataset"));
    }
    let mut series: BTreeMap<PairType, Vec<f64>> = PairType::ALL.iter().map(|&t| (t, Vec::new())).collect();
    for (i, ex) in examples.iter().enumerate() {
        let (x, w, l) = (ex.task.instruction(), ex.chosen_body(), ex.rejected_body());
        let ctx = format_policy_input(x, &policy.vocab())?;
        let y = policy.sample(&ctx, &SamplingConfig::new(temperature, max_len, derive_seed(seed, &format!("hist/{i}"))))?;
        let vals = [
            (PairType::Wl, gap.reward_gap(x, w, l)?),
            (PairType::Ww, gap.reward_gap(x, w, w)?),
            (PairType::Ll, gap.reward_gap(x, l, l)?),
            (PairType::Lw, gap.reward_gap(x, l, w)?),
            (PairType::Yy, gap.reward_gap(x, &y.tokens, &y.tokens)?),
        ];
        for (t, v) in vals {
            series.get_mut(&t).expect("all types present").push(v);
        }
    }
    Ok(RewardHistogram { series })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Worse,
    Similar,
    Better,
}

impl Region {
    pub fn of(prob: f64, band: TieBand) -> Self {
        match band.classify(prob) {
            Verdict::Win => Region::Better,
            Verdict::Lose => Region::Worse,
            Verdict::Tie => Region::Similar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionPoint {
    pub step: usize,
    /// Sigmoid of the logged mean reward.
    pub prob: f64,
    pub region: Region,
}

/// Labels each logged step of an improver RL run by the sigmoid of its
/// mean reward.
pub fn reward_region_trace(rows: &[MetricsRow], band: TieBand) -> Result<Vec<RegionPoint>> {
    rows.iter()
        .map(|r| {
            let m = r
                .mean_reward
                .ok_or_else(|| Error::Parse(format!("metrics row at step {} has no mean_reward", r.step)))?;
            let prob = sigmoid(m);
            Ok(RegionPoint {
                step: r.step,
                prob,
                region: Region::of(prob, band),
            })
        })
        .collect()
}

pub fn reward_region_trace_csv<R: Read>(r: R, band: TieBand) -> Result<Vec<RegionPoint>> {
    reward_region_trace(&crate::train::read_metrics_csv(r)?, band)
}

pub fn write_region_trace_csv<W: Write>(trace: &[RegionPoint], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["step", "prob", "region"])?;
    for p in trace {
        wtr.write_record([p.step.to_string(), format!("{:.6}", p.prob), format!("{:?}", p.region)])?;
    }
    wtr.flush().map_err(|e| Error::io("<region trace>", e))?;
    Ok(())
}

/// Draws `n` policy samples from one stream seeded by `seed` and keeps the
/// first one with the highest policy reward.
pub fn best_of_n(
    policy: &SeqModel,
    reward_policy: &RewardModel,
    x: &[Token],
    n: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<Sample> {
    if n == 0 {
        return Err(Error::InvalidInput("best_of_n needs n >= 1".into()));
    }
    expect_kind(reward_policy, RewardKind::Policy)?;
    let ctx = format_policy_input(x, &policy.vocab())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Sample)> = None;
    for _ in 0..n {
        let s = policy.sample_with(&ctx, temperature, max_len, &mut rng)?;
        let r = reward_policy.reward(x, &s.tokens)?;
        if best.as_ref().map(|(b, _)| r > *b).unwrap_or(true) {
            best = Some((r, s));
        }
    }
    Ok(best.expect("n >= 1").1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub reference_temperature: f64,
    pub max_len: usize,
    pub seed: u64,
    pub band: TieBand,
}

/// Δ of one improver pass over a fixed set of policy references, per
/// improvement temperature and per evaluator. References are drawn once and
/// shared across temperatures; empty references are skipped.
pub fn temperature_sweep(
    pit: &SeqModel,
    policy: &SeqModel,
    tasks: &[TaskInstance],
    temperatures: &[f64],
    evaluators: &[Evaluator<'_>],
    cfg: &SweepConfig,
) -> Result<Vec<EvalReport>> {
    if temperatures.is_empty() || evaluators.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let mut refs: Vec<(&TaskInstance, TokenSeq)> = Vec::with_capacity(tasks.len());
    for t in tasks {
        let ctx = format_policy_input(t.instruction(), &policy.vocab())?;
        let seed = derive_seed(cfg.seed, &format!("sweep/{}/ref", t.id));
        let s = policy.sample(&ctx, &SamplingConfig::new(cfg.reference_temperature, cfg.max_len, seed))?;
        if !s.tokens.is_empty() {
            refs.push((t, s.tokens));
        }
    }
    let mut counter = GenerationCounter::default();
    let mut out = Vec::new();
    for &temp in temperatures {
        let mut improved = Vec::with_capacity(refs.len());
        for (t, y0) in &refs {
            let seed = derive_seed(cfg.seed, &format!("sweep/{}/{temp}", t.id));
            improved.push(improve_once(pit, t.instruction(), y0, temp, cfg.max_len, seed, &mut counter)?.tokens);
        }
        let pairs: Vec<Pair<'_>> = refs
            .iter()
            .zip(&improved)
            .map(|((t, y0), y1)| Pair { task: t, a: y1, b: y0 })
            .collect();
        for ev in evaluators {
            out.push(
                compare_batch(ev, &pairs, cfg.band)?
                    .labeled("pit", "original")
                    .at_temperature(temp),
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{gen_dataset, gen_task, EnvConfig};
    use crate::model::tests::tiny_arch;
    use crate::vocab::Vocab;
    use proptest::prelude::*;
    use rand::Rng;

    fn task() -> TaskInstance {
        gen_task(3, &EnvConfig::default()).unwrap()
    }

    fn record(a: &str, b: &str, v: Verdict) -> ComparisonRecord {
        ComparisonRecord {
            task_id: "t".into(),
            method_a: a.into(),
            method_b: b.into(),
            verdict: v,
            evaluator: EvaluatorKind::Oracle,
        }
    }

    #[test]
    fn delta_follows_counts() {
        let v = [vec![Verdict::Win; 5], vec![Verdict::Lose; 3], vec![Verdict::Tie; 2]].concat();
        let r = EvalReport::from_verdicts(&v, EvaluatorKind::Oracle).unwrap();
        assert_eq!((r.win, r.lose, r.tie, r.total), (5, 3, 2, 10));
        assert!((r.delta - 0.2).abs() < 1e-12);
        let all = EvalReport::from_verdicts(&[Verdict::Win; 10], EvaluatorKind::Oracle).unwrap();
        assert_eq!(all.delta, 1.0);
        assert!(matches!(compare_batch(&Evaluator::Oracle { lambda: 0.5 }, &[], TieBand::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn swapping_operands_negates_delta() {
        let cfg = EnvConfig::default();
        let data = gen_dataset(&cfg, 4).unwrap();
        let ev = Evaluator::Oracle { lambda: cfg.lambda };
        let fwd: Vec<Pair<'_>> = data
            .iter()
            .take(50)
            .map(|e| Pair { task: &e.task, a: e.chosen_body(), b: e.rejected_body() })
            .collect();
        let back: Vec<Pair<'_>> = fwd.iter().map(|p| Pair { task: p.task, a: p.b, b: p.a }).collect();
        let band = TieBand::default();
        let (f, b) = (compare_batch(&ev, &fwd, band).unwrap(), compare_batch(&ev, &back, band).unwrap());
        assert_eq!(f.delta, -b.delta);
        assert!(f.delta > 0.0);
    }

    #[test]
    fn elo_defaults() {
        let cfg = EloConfig::default();
        let t = elo(&["b", "a"], &[], &cfg).unwrap();
        assert_eq!(t.entries.iter().map(|e| e.method.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert!(t.entries.iter().all(|e| e.rating == 1000.0));

        let t = elo(&["a", "b"], &[record("a", "b", Verdict::Win)], &cfg).unwrap();
        assert_eq!(t.get("a").unwrap().rating, 1002.0);
        assert_eq!(t.get("b").unwrap().rating, 998.0);

        let t = elo(&["a", "b"], &[record("a", "b", Verdict::Tie)], &cfg).unwrap();
        assert_eq!(t.get("a").unwrap().rating, 1000.0);

        assert!(matches!(
            elo(&["a"], &[record("a", "z", Verdict::Win)], &cfg),
            Err(Error::UnregisteredMethod(m)) if m == "z"
        ));
    }

    #[test]
    fn shuffle_stability_needs_two_orderings() {
        let recs = vec![record("a", "b", Verdict::Win)];
        assert!(shuffle_stability(&["a", "b"], &recs, 1, 0, &EloConfig::default()).is_err());
        let s = shuffle_stability(&["a", "b"], &recs, 3, 0, &EloConfig::default()).unwrap();
        assert_eq!(s.stable_top.as_deref(), Some("a"));
        assert_eq!(s.stable_bottom.as_deref(), Some("b"));
        assert!(s.rating_sums.iter().all(|&x| x == 2000.0));
    }

    proptest! {
        #[test]
        fn elo_conserves_rating_mass(seq in prop::collection::vec((0usize..4, 0usize..4, 0u8..3), 0..300)) {
            let methods = ["m0", "m1", "m2", "m3"];
            let recs: Vec<ComparisonRecord> = seq
                .into_iter()
                .filter(|(a, b, _)| a != b)
                .map(|(a, b, v)| record(methods[a], methods[b], [Verdict::Win, Verdict::Lose, Verdict::Tie][v as usize]))
                .collect();
            let t = elo(&methods, &recs, &EloConfig::default()).unwrap();
            prop_assert_eq!(t.rating_sum(), 4000.0);
            let mut ranks: Vec<usize> = t.entries.iter().map(|e| e.rank).collect();
            ranks.sort_unstable();
            prop_assert_eq!(ranks, vec![1, 2, 3, 4]);
        }
    }

    #[test]
    fn oracle_agrees_with_itself_and_coin_flip_does_not() {
        let cfg = EnvConfig { dataset_size: 1000, ..EnvConfig::default() };
        let data = gen_dataset(&cfg, 9).unwrap();
        let ev = Evaluator::Oracle { lambda: cfg.lambda };
        // A quality gap of exactly the 0.2 margin sits just inside the band
        // (logit 0.55 is about 0.2007), so only wider pairs are strict.
        let wide: Vec<PreferenceExample> =
            data.iter().filter(|e| e.q_chosen - e.q_rejected > 0.21).cloned().collect();
        assert!(wide.len() > 900);
        assert_eq!(agreement(&ev, &wide, TieBand::default()).unwrap(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coin = agreement_with(&data, |_| Ok(if rng.gen_bool(0.5) { Verdict::Win } else { Verdict::Lose })).unwrap();
        // Binomial sd at n = 1000 is about 0.016; 0.05 is three of them.
        assert!((coin - 0.5).abs() <= 0.05, "coin flip agreement {coin}");
        assert!(agreement(&ev, &[], TieBand::default()).is_err());
    }

    #[test]
    fn region_bands() {
        let band = TieBand::default();
        let row = |m: f64| MetricsRow { mean_reward: Some(m), ..MetricsRow::loss_only(0, 0.0) };
        let tr = reward_region_trace(&[row(0.0), row(0.9f64.ln() - 0.1f64.ln()), row(-3.0)], band).unwrap();
        assert_eq!(tr.iter().map(|p| p.region).collect::<Vec<_>>(), [Region::Similar, Region::Better, Region::Worse]);
        assert_eq!(Region::of(0.55, band), Region::Similar);
        assert_eq!(Region::of(0.45, band), Region::Similar);
        assert!(reward_region_trace(&[MetricsRow::loss_only(3, 1.0)], band).is_err());
        assert!(reward_region_trace_csv("bogus,header\n1,2\n".as_bytes(), band).is_err());
    }

    #[test]
    fn best_of_one_is_a_plain_sample() {
        let vocab = Vocab::default();
        let policy = SeqModel::new(tiny_arch(), vocab.hash(), 5).unwrap();
        let rm = RewardModel::new(RewardKind::Policy, tiny_arch(), vocab.hash(), 6).unwrap();
        let t = task();
        let x = t.instruction();
        let ctx = format_policy_input(x, &vocab).unwrap();
        let plain = policy.sample(&ctx, &SamplingConfig::new(1.0, 6, 77)).unwrap();
        assert_eq!(best_of_n(&policy, &rm, x, 1, 1.0, 6, 77).unwrap(), plain);
        assert!(best_of_n(&policy, &rm, x, 0, 1.0, 6, 77).is_err());

        // Argmax contract: replay the same stream and score every candidate.
        let best = best_of_n(&policy, &rm, x, 6, 1.0, 6, 78).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let top = (0..6)
            .map(|_| rm.reward(x, &policy.sample_with(&ctx, 1.0, 6, &mut rng).unwrap().tokens).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(rm.reward(x, &best.tokens).unwrap(), top);
    }

    #[test]
    fn histogram_has_five_series() {
        let cfg = EnvConfig { dataset_size: 6, ..EnvConfig::default() };
        let vocab = cfg.vocab().unwrap();
        let data = gen_dataset(&cfg, 2).unwrap();
        let mut arch = tiny_arch();
        arch.context_len = 48;
        let gap = RewardModel::new(RewardKind::Gap, arch.clone(), vocab.hash(), 1).unwrap();
        let policy = SeqModel::new(arch, vocab.hash(), 2).unwrap();
        let h = reward_histogram(&gap, &data, &policy, 1.0, 8, 0).unwrap();
        assert_eq!(h.series.len(), 5);
        assert!(PairType::ALL.iter().all(|&t| h.values(t).len() == 6));
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 31);
        assert!(reward_histogram(&gap, &[], &policy, 1.0, 8, 0).is_err());
    }

    #[test]
    fn report_csv_columns() {
        let r = EvalReport::from_verdicts(&[Verdict::Win, Verdict::Tie], EvaluatorKind::RewardGap)
            .unwrap()
            .labeled("pit", "original")
            .at_temperature(0.4);
        let mut buf = Vec::new();
        write_reports_csv(&[r], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next().unwrap(), "method_a,method_b,win,lose,tie,delta,evaluator,temperature");
        assert_eq!(s.lines().nth(1).unwrap(), "pit,original,1,0,1,0.500000,reward_gap,0.4");
    }
}

//! Reward models, their training objectives and the tie-band verdict rule.
//!
//! Both reward kinds share the transformer backbone; the scalar head maps the
//! mean of the final hidden states through a linear layer. The policy reward
//! scores `BOS HUM x ASST y`; the gap reward scores
//! `BOS HUM x ASST CAND y2 IMPR y1`, i.e. how much `y1` improves on `y2`.

use serde::{Deserialize, Serialize};

use crate::env::PreferenceExample;
use crate::error::{Error, Result};
use crate::format::{format_gap_input, format_reward_input};
use crate::model::{init_params, ArchConfig, Layout, Trace};
use crate::vocab::{Token, Vocab, NUM_RESERVED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Policy,
    Gap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub kind: RewardKind,
    pub arch: ArchConfig,
    /// Backbone parameters followed by the head (`d_model` weights, 1 bias).
    pub params: Vec<f64>,
    pub vocab_hash: String,
}

/// Sum or mean over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / n as f64,
            Reduction::Sum => 1.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// -ln sigma(z), stable for large |z|.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

impl RewardModel {
    /// Random backbone with a zero head, so every score starts at 0.
    pub fn new(kind: RewardKind, arch: ArchConfig, vocab_hash: impl Into<String>, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = init_params(&arch, seed);
        params.extend(std::iter::repeat(0.0).take(arch.d_model + 1));
        Ok(RewardModel {
            kind,
            arch,
            params,
            vocab_hash: vocab_hash.into(),
        })
    }

    /// Backbone copied from a generator, head zeroed.
    pub fn from_backbone(kind: RewardKind, backbone: &crate::model::SeqModel) -> Self {
        let mut params = backbone.params.clone();
        params.extend(std::iter::repeat(0.0).take(backbone.arch.d_model + 1));
        RewardModel {
            kind,
            arch: backbone.arch.clone(),
            params,
            vocab_hash: backbone.vocab_hash.clone(),
        }
    }

    pub fn from_params(kind: RewardKind, arch: ArchConfig, vocab_hash: impl Into<String>, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let expected = Self::param_count_for(&arch);
        if params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} reward-model parameters, found {}",
                params.len()
            )));
        }
        Ok(RewardModel {
            kind,
            arch,
            params,
            vocab_hash: vocab_hash.into(),
        })
    }

    pub fn param_count_for(arch: &ArchConfig) -> usize {
        Layout::new(arch).len + arch.d_model + 1
    }

    fn vocab(&self) -> Vocab {
        Vocab::new(self.arch.vocab_size - NUM_RESERVED).expect("validated arch has content tokens")
    }

    fn head_offset(&self) -> usize {
        self.params.len() - self.arch.d_model - 1
    }

    fn check_len(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.arch.context_len {
            return Err(Error::Overlength {
                len: tokens.len(),
                max: self.arch.context_len,
            });
        }
        Ok(())
    }

    /// Scalar score of an already formatted input.
    pub fn score_tokens(&self, tokens: &[Token]) -> Result<f64> {
        self.check_len(tokens)?;
        let mut tr = Trace::new(&self.arch);
        tr.extend(&self.arch, &self.params, tokens)?;
        Ok(self.head(&tr))
    }

    fn head(&self, tr: &Trace) -> f64 {
        let d = self.arch.d_model;
        let h = self.head_offset();
        let n = tr.len() as f64;
        let mut pooled = vec![0.0; d];
        for i in 0..tr.len() {
            for (p, &v) in pooled.iter_mut().zip(tr.hidden_at(i)) {
                *p += v / n;
            }
        }
        pooled.iter().zip(&self.params[h..h + d]).map(|(a, b)| a * b).sum::<f64>() + self.params[h + d]
    }

    /// Adds `scale * d score / d params` into `grads`; returns the score.
    pub fn score_grad(&self, tokens: &[Token], scale: f64, grads: &mut [f64]) -> Result<f64> {
        self.check_len(tokens)?;
        let mut tr = Trace::new(&self.arch);
        tr.extend(&self.arch, &self.params, tokens)?;
        let score = self.head(&tr);
        let d = self.arch.d_model;
        let h = self.head_offset();
        let n = tr.len() as f64;
        for i in 0..tr.len() {
            for (g, &v) in grads[h..h + d].iter_mut().zip(tr.hidden_at(i)) {
                *g += scale * v / n;
            }
        }
        grads[h + d] += scale;
        let per_pos: Vec<f64> = self.params[h..h + d].iter().map(|w| scale * w / n).collect();
        let d_hidden: Vec<f64> = (0..tr.len()).flat_map(|_| per_pos.iter().copied()).collect();
        tr.backward(&self.arch, &self.params[..h], &d_hidden, &mut grads[..h]);
        Ok(score)
    }

    pub fn reward(&self, x: &[Token], y: &[Token]) -> Result<f64> {
        self.score_tokens(&format_reward_input(x, y, &self.vocab())?)
    }

    /// How much `y1` improves on `y2` for instruction `x`.
    pub fn reward_gap(&self, x: &[Token], y1: &[Token], y2: &[Token]) -> Result<f64> {
        self.score_tokens(&format_gap_input(x, y1, y2, &self.vocab())?)
    }

    /// Generic pairwise preference score: `reward_gap` for the gap kind,
    /// the reward difference for the policy kind.
    pub fn preference_score(&self, x: &[Token], y1: &[Token], y2: &[Token]) -> Result<f64> {
        match self.kind {
            RewardKind::Gap => self.reward_gap(x, y1, y2),
            RewardKind::Policy => gap_by_subtraction(self, x, y1, y2),
        }
    }

    /// Shifts the head bias so that swapped pairs score symmetrically around
    /// zero on `examples`: mean `r_w + r_l` for the policy kind, mean
    /// `g(w,l) + g(l,w)` for the gap kind. Pairwise objectives do not see the
    /// bias, so this fixes an otherwise arbitrary offset without changing any
    /// loss or accuracy.
    pub fn center(&mut self, examples: &[PreferenceExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Empty("centering set"));
        }
        let mut total = 0.0;
        for ex in examples {
            let (x, w, l) = (ex.task.instruction(), ex.chosen_body(), ex.rejected_body());
            total += match self.kind {
                RewardKind::Policy => self.reward(x, w)? + self.reward(x, l)?,
                RewardKind::Gap => self.reward_gap(x, w, l)? + self.reward_gap(x, l, w)?,
            };
        }
        let shift = total / (2.0 * examples.len() as f64);
        let b = self.params.len() - 1;
        self.params[b] -= shift;
        Ok(shift)
    }
}

/// Gap estimate from two policy-reward calls.
pub fn gap_by_subtraction(m: &RewardModel, x: &[Token], y1: &[Token], y2: &[Token]) -> Result<f64> {
    Ok(m.reward(x, y1)? - m.reward(x, y2)?)
}

/// The four gap evaluations entering the pairwise gap objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapScores {
    pub wl: f64,
    pub ww: f64,
    pub ll: f64,
    pub lw: f64,
}

impl GapScores {
    pub fn of(m: &RewardModel, ex: &PreferenceExample) -> Result<Self> {
        let x = ex.task.instruction();
        let (w, l) = (ex.chosen_body(), ex.rejected_body());
        Ok(GapScores {
            wl: m.reward_gap(x, w, l)?,
            ww: m.reward_gap(x, w, w)?,
            ll: m.reward_gap(x, l, l)?,
            lw: m.reward_gap(x, l, w)?,
        })
    }
}

/// (higher, lower) pairs of the ordering chain wl >= ww ~ ll >= lw.
const GAP_PAIRS: [(usize, usize); 5] = [(0, 1), (0, 2), (0, 3), (1, 3), (2, 3)];

/// Per-example pairwise gap loss and its derivative w.r.t. (wl, ww, ll, lw).
pub fn gap_chain_loss(g: GapScores) -> (f64, [f64; 4]) {
    let v = [g.wl, g.ww, g.ll, g.lw];
    let mut loss = 0.0;
    let mut d = [0.0; 4];
    for (hi, lo) in GAP_PAIRS {
        let z = v[hi] - v[lo];
        loss += neg_log_sigmoid(z);
        let s = 1.0 - sigmoid(z);
        d[hi] -= s;
        d[lo] += s;
    }
    (loss, d)
}

/// Pointwise regression targets for (wl, lw, ww, ll).
pub const MSE_TARGETS: GapScores = GapScores {
    wl: 1.0,
    lw: 0.0,
    ww: 0.5,
    ll: 0.5,
};

pub fn pointwise_mse(g: GapScores) -> (f64, [f64; 4]) {
    let v = [g.wl, g.ww, g.ll, g.lw];
    let t = [MSE_TARGETS.wl, MSE_TARGETS.ww, MSE_TARGETS.ll, MSE_TARGETS.lw];
    let mut loss = 0.0;
    let mut d = [0.0; 4];
    for i in 0..4 {
        let e = v[i] - t[i];
        loss += e * e / 4.0;
        d[i] = e / 2.0;
    }
    (loss, d)
}

/// Training objective for a reward model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmObjective {
    /// -ln sigma(r_w - r_l) on the policy reward.
    Pairwise,
    /// The five-term ordering loss on the gap reward.
    GapChain,
    /// Squared error to fixed targets on the gap reward.
    PointwiseMse,
}

impl RmObjective {
    pub fn default_for(kind: RewardKind) -> Self {
        match kind {
            RewardKind::Policy => RmObjective::Pairwise,
            RewardKind::Gap => RmObjective::GapChain,
        }
    }
}

/// Batch loss; when `grads` is given, accumulates its gradient there.
pub fn rm_loss(
    m: &RewardModel,
    batch: &[PreferenceExample],
    objective: RmObjective,
    reduction: Reduction,
    mut grads: Option<&mut [f64]>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let vocab = m.vocab();
    let f = reduction.factor(batch.len());
    let mut total = 0.0;
    for ex in batch {
        let x = ex.task.instruction();
        let (w, l) = (ex.chosen_body(), ex.rejected_body());
        match objective {
            RmObjective::Pairwise => {
                if m.kind != RewardKind::Policy {
                    return Err(Error::InvalidInput("pairwise objective needs a policy reward model".into()));
                }
                let tw = format_reward_input(x, w, &vocab)?;
                let tl = format_reward_input(x, l, &vocab)?;
                let rw = m.score_tokens(&tw)?;
                let rl = m.score_tokens(&tl)?;
                let z = rw - rl;
                total += f * neg_log_sigmoid(z);
                if let Some(g) = grads.as_deref_mut() {
                    let s = 1.0 - sigmoid(z);
                    m.score_grad(&tw, -f * s, g)?;
                    m.score_grad(&tl, f * s, g)?;
                }
            }
            RmObjective::GapChain | RmObjective::PointwiseMse => {
                if m.kind != RewardKind::Gap {
                    return Err(Error::InvalidInput("gap objectives need a gap reward model".into()));
                }
                let inputs = [
                    format_gap_input(x, w, l, &vocab)?,
                    format_gap_input(x, w, w, &vocab)?,
                    format_gap_input(x, l, l, &vocab)?,
                    format_gap_input(x, l, w, &vocab)?,
                ];
                let mut s = [0.0; 4];
                for (si, t) in s.iter_mut().zip(&inputs) {
                    *si = m.score_tokens(t)?;
                }
                let scores = GapScores {
                    wl: s[0],
                    ww: s[1],
                    ll: s[2],
                    lw: s[3],
                };
                let (loss, d) = match objective {
                    RmObjective::GapChain => gap_chain_loss(scores),
                    _ => pointwise_mse(scores),
                };
                total += f * loss;
                if let Some(g) = grads.as_deref_mut() {
                    for (t, di) in inputs.iter().zip(d) {
                        if di != 0.0 {
                            m.score_grad(t, f * di, g)?;
                        }
                    }
                }
            }
        }
    }
    Ok(total)
}

pub fn rm_loss_policy(m: &RewardModel, batch: &[PreferenceExample]) -> Result<f64> {
    rm_loss(m, batch, RmObjective::Pairwise, Reduction::Mean, None)
}

pub fn rm_loss_gap(m: &RewardModel, batch: &[PreferenceExample]) -> Result<f64> {
    rm_loss(m, batch, RmObjective::GapChain, Reduction::Mean, None)
}

pub fn rm_loss_pointwise_mse(m: &RewardModel, batch: &[PreferenceExample]) -> Result<f64> {
    rm_loss(m, batch, RmObjective::PointwiseMse, Reduction::Mean, None)
}

/// Fraction of examples the model orders correctly: `r_w > r_l` for the
/// policy kind, `g(w,l) > g(l,w)` for the gap kind.
pub fn pairwise_accuracy(m: &RewardModel, examples: &[PreferenceExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("example set"));
    }
    let mut hits = 0usize;
    for ex in examples {
        let x = ex.task.instruction();
        let s = m.preference_score(x, ex.chosen_body(), ex.rejected_body())?;
        let r = m.preference_score(x, ex.rejected_body(), ex.chosen_body())?;
        if s > r {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Win,
    Lose,
    Tie,
}

impl Verdict {
    pub fn flip(self) -> Self {
        match self {
            Verdict::Win => Verdict::Lose,
            Verdict::Lose => Verdict::Win,
            Verdict::Tie => Verdict::Tie,
        }
    }
}

/// Closed interval on sigma(r1 - r2) inside which two responses tie.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TieBand {
    pub lo: f64,
    pub hi: f64,
}

pub const TIE_BAND: TieBand = TieBand { lo: 0.45, hi: 0.55 };

impl Default for TieBand {
    fn default() -> Self {
        TIE_BAND
    }
}

impl TieBand {
    pub fn classify(&self, prob: f64) -> Verdict {
        if prob > self.hi {
            Verdict::Win
        } else if prob < self.lo {
            Verdict::Lose
        } else {
            Verdict::Tie
        }
    }
}

pub fn judge(r1: f64, r2: f64, band: TieBand) -> Verdict {
    // Evaluate on the side where sigma is computed without cancellation so
    // judge(a, b) and judge(b, a) always mirror each other.
    let z = r1 - r2;
    if z >= 0.0 {
        band.classify(sigmoid(z))
    } else {
        let mirrored = TieBand {
            lo: 1.0 - band.hi,
            hi: 1.0 - band.lo,
        };
        mirrored.classify(sigmoid(-z)).flip()
    }
}

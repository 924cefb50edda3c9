//! Compact causal transformer used for the policy, the improver and as the
//! reward-model backbone.
//!
//! Parameters live in one flat `f64` buffer laid out in declaration order:
//! token embedding, position embedding, then per block
//! `ln1, wq, wk, wv, wo, ln2, w1, b1, w2, b2`, then the final norm and the
//! language-model head. Blocks are pre-norm (RMSNorm) with a GELU MLP.
//! Gradients are computed by an explicit backward pass over a [`Trace`].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Token, TokenSeq, Vocab, EOS, NUM_RESERVED};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            vocab_size: 38,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            context_len: 64,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= NUM_RESERVED || self.context_len < 2 || self.d_ff == 0 {
            return Err(Error::Config("degenerate architecture".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).len
    }
}

#[derive(Debug, Clone)]
struct BlockOffsets {
    ln1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    tok: usize,
    pos: usize,
    blocks: Vec<BlockOffsets>,
    lnf: usize,
    lm_w: usize,
    lm_b: usize,
    pub(crate) len: usize,
}

impl Layout {
    pub(crate) fn new(a: &ArchConfig) -> Layout {
        let (d, f, v) = (a.d_model, a.d_ff, a.vocab_size);
        let mut at = 0usize;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok = take(v * d);
        let pos = take(a.context_len * d);
        let blocks = (0..a.n_layers)
            .map(|_| BlockOffsets {
                ln1: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2: take(d),
                w1: take(d * f),
                b1: take(f),
                w2: take(f * d),
                b2: take(d),
            })
            .collect();
        let lnf = take(d);
        let lm_w = take(d * v);
        let lm_b = take(v);
        Layout {
            tok,
            pos,
            blocks,
            lnf,
            lm_w,
            lm_b,
            len: at,
        }
    }
}

/// Random initialization of a backbone parameter buffer.
pub(crate) fn init_params(a: &ArchConfig, seed: u64) -> Vec<f64> {
    let l = Layout::new(a);
    let mut p = vec![0.0; l.len];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f, v) = (a.d_model, a.d_ff, a.vocab_size);
    let mut fill = |p: &mut [f64], std: f64| {
        let n = Normal::new(0.0, std).expect("finite std");
        for x in p.iter_mut() {
            *x = n.sample(&mut rng);
        }
    };
    fill(&mut p[l.tok..l.tok + v * d], 0.3);
    fill(&mut p[l.pos..l.pos + a.context_len * d], 0.1);
    let resid = 1.0 / ((2 * a.n_layers.max(1)) as f64).sqrt();
    for b in &l.blocks {
        p[b.ln1..b.ln1 + d].fill(1.0);
        p[b.ln2..b.ln2 + d].fill(1.0);
        let s = 1.0 / (d as f64).sqrt();
        fill(&mut p[b.wq..b.wq + d * d], s);
        fill(&mut p[b.wk..b.wk + d * d], s);
        fill(&mut p[b.wv..b.wv + d * d], s);
        fill(&mut p[b.wo..b.wo + d * d], s * resid);
        fill(&mut p[b.w1..b.w1 + d * f], s);
        fill(&mut p[b.w2..b.w2 + f * d], resid / (f as f64).sqrt());
    }
    p[l.lnf..l.lnf + d].fill(1.0);
    fill(&mut p[l.lm_w..l.lm_w + d * v], 0.02);
    p
}

/// y = x W with W stored row-major as [n_in x n_out].
fn matvec(x: &[f64], w: &[f64], n_out: usize, y: &mut [f64]) {
    y.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n_out..(i + 1) * n_out];
        for (yj, &wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
}

/// dx += dy W^T and dW += x^T dy.
fn matvec_backward(x: &[f64], w: &[f64], dy: &[f64], dx: &mut [f64], dw: &mut [f64]) {
    let n_out = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n_out..(i + 1) * n_out];
        let drow = &mut dw[i * n_out..(i + 1) * n_out];
        let mut acc = 0.0;
        for j in 0..n_out {
            acc += dy[j] * row[j];
            drow[j] += xi * dy[j];
        }
        dx[i] += acc;
    }
}

fn rmsnorm(x: &[f64], g: &[f64], out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(g) {
        *o = xi * inv * gi;
    }
    inv
}

fn rmsnorm_backward(x: &[f64], inv: f64, g: &[f64], dy: &[f64], dx: &mut [f64], dg: &mut [f64]) {
    let n = x.len() as f64;
    let mut dot = 0.0;
    for i in 0..x.len() {
        let normed = x[i] * inv;
        dg[i] += dy[i] * normed;
        dot += dy[i] * g[i] * normed;
    }
    let mean = dot / n;
    for i in 0..x.len() {
        let normed = x[i] * inv;
        dx[i] += inv * (dy[i] * g[i] - normed * mean);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

#[derive(Debug, Clone, Default)]
struct BlockTrace {
    x_in: Vec<f64>,
    inv1: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per position, head-major attention weights over positions `0..=i`.
    probs: Vec<Vec<f64>>,
    o: Vec<f64>,
    mid: Vec<f64>,
    inv2: Vec<f64>,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Activations recorded while feeding tokens one position at a time.
///
/// The same incremental path serves decoding (it doubles as a KV cache) and
/// training (the backward pass replays it).
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    d: usize,
    tokens: TokenSeq,
    blocks: Vec<BlockTrace>,
    x_final: Vec<f64>,
    inv_f: Vec<f64>,
    pub(crate) hidden: Vec<f64>,
}

impl Trace {
    pub(crate) fn new(a: &ArchConfig) -> Self {
        Trace {
            d: a.d_model,
            tokens: Vec::new(),
            blocks: vec![BlockTrace::default(); a.n_layers],
            x_final: Vec::new(),
            inv_f: Vec::new(),
            hidden: Vec::new(),
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.tokens.len()
    }

    pub(crate) fn hidden_at(&self, i: usize) -> &[f64] {
        &self.hidden[i * self.d..(i + 1) * self.d]
    }

    pub(crate) fn push(&mut self, a: &ArchConfig, p: &[f64], token: Token) -> Result<()> {
        let l = Layout::new(a);
        self.push_with(a, &l, p, token)
    }

    fn push_with(&mut self, a: &ArchConfig, l: &Layout, p: &[f64], token: Token) -> Result<()> {
        let i = self.tokens.len();
        if i >= a.context_len {
            return Err(Error::Overlength {
                len: i + 1,
                max: a.context_len,
            });
        }
        if token as usize >= a.vocab_size {
            return Err(Error::InvalidInput(format!("token {token} outside vocabulary")));
        }
        let (d, f) = (a.d_model, a.d_ff);
        let nh = a.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        self.tokens.push(token);

        let mut x: Vec<f64> = p[l.tok + token as usize * d..][..d]
            .iter()
            .zip(&p[l.pos + i * d..][..d])
            .map(|(t, q)| t + q)
            .collect();
        let mut buf = vec![0.0; d];
        let mut buf_f = vec![0.0; f];

        for (bt, bo) in self.blocks.iter_mut().zip(&l.blocks) {
            bt.x_in.extend_from_slice(&x);
            let inv = rmsnorm(&x, &p[bo.ln1..bo.ln1 + d], &mut buf);
            bt.inv1.push(inv);
            bt.a.extend_from_slice(&buf);
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            matvec(&buf, &p[bo.wq..bo.wq + d * d], d, &mut q);
            matvec(&buf, &p[bo.wk..bo.wk + d * d], d, &mut k);
            matvec(&buf, &p[bo.wv..bo.wv + d * d], d, &mut v);
            bt.q.extend_from_slice(&q);
            bt.k.extend_from_slice(&k);
            bt.v.extend_from_slice(&v);

            let n = i + 1;
            let mut probs = vec![0.0; nh * n];
            let mut o = vec![0.0; d];
            for h in 0..nh {
                let qh = &q[h * dh..(h + 1) * dh];
                let ph = &mut probs[h * n..(h + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in ph.iter_mut().enumerate() {
                    let kj = &bt.k[j * d + h * dh..j * d + (h + 1) * dh];
                    *pj = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(*pj);
                }
                let mut z = 0.0;
                for pj in ph.iter_mut() {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                for (j, pj) in ph.iter_mut().enumerate() {
                    *pj /= z;
                    let vj = &bt.v[j * d + h * dh..j * d + (h + 1) * dh];
                    for (oc, &vc) in o[h * dh..(h + 1) * dh].iter_mut().zip(vj) {
                        *oc += *pj * vc;
                    }
                }
            }
            bt.probs.push(probs);
            bt.o.extend_from_slice(&o);
            matvec(&o, &p[bo.wo..bo.wo + d * d], d, &mut buf);
            for (xc, bc) in x.iter_mut().zip(&buf) {
                *xc += bc;
            }
            bt.mid.extend_from_slice(&x);

            let inv = rmsnorm(&x, &p[bo.ln2..bo.ln2 + d], &mut buf);
            bt.inv2.push(inv);
            bt.b.extend_from_slice(&buf);
            matvec(&buf, &p[bo.w1..bo.w1 + d * f], f, &mut buf_f);
            for (u, &bias) in buf_f.iter_mut().zip(&p[bo.b1..bo.b1 + f]) {
                *u += bias;
            }
            bt.u.extend_from_slice(&buf_f);
            for u in buf_f.iter_mut() {
                *u = gelu(*u);
            }
            bt.g.extend_from_slice(&buf_f);
            matvec(&buf_f, &p[bo.w2..bo.w2 + f * d], d, &mut buf);
            for ((xc, mc), &bias) in x.iter_mut().zip(&buf).zip(&p[bo.b2..bo.b2 + d]) {
                *xc += mc + bias;
            }
        }
        self.x_final.extend_from_slice(&x);
        let inv = rmsnorm(&x, &p[l.lnf..l.lnf + d], &mut buf);
        self.inv_f.push(inv);
        self.hidden.extend_from_slice(&buf);
        Ok(())
    }

    pub(crate) fn extend(&mut self, a: &ArchConfig, p: &[f64], tokens: &[Token]) -> Result<()> {
        let l = Layout::new(a);
        for &t in tokens {
            self.push_with(a, &l, p, t)?;
        }
        Ok(())
    }

    /// Back-propagates `d_hidden` (gradient w.r.t. the final normalized
    /// hidden states, `len * d_model`) into `grads`.
    pub(crate) fn backward(&self, a: &ArchConfig, p: &[f64], d_hidden: &[f64], grads: &mut [f64]) {
        let l = Layout::new(a);
        let (d, f) = (a.d_model, a.d_ff);
        let nh = a.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let t_len = self.tokens.len();

        let mut dx = vec![0.0; t_len * d];
        for i in 0..t_len {
            rmsnorm_backward(
                &self.x_final[i * d..(i + 1) * d],
                self.inv_f[i],
                &p[l.lnf..l.lnf + d],
                &d_hidden[i * d..(i + 1) * d],
                &mut dx[i * d..(i + 1) * d],
                &mut grads[l.lnf..l.lnf + d],
            );
        }

        for (bt, bo) in self.blocks.iter().zip(&l.blocks).rev() {
            // MLP: x_out = mid + W2 gelu(W1 norm(mid) + b1) + b2
            let mut d_mid = dx.clone();
            for i in 0..t_len {
                let dm = &dx[i * d..(i + 1) * d];
                for (gb, &v) in grads[bo.b2..bo.b2 + d].iter_mut().zip(dm) {
                    *gb += v;
                }
                let mut dg = vec![0.0; f];
                matvec_backward(
                    &bt.g[i * f..(i + 1) * f],
                    &p[bo.w2..bo.w2 + f * d],
                    dm,
                    &mut dg,
                    &mut grads[bo.w2..bo.w2 + f * d],
                );
                let du: Vec<f64> = dg
                    .iter()
                    .zip(&bt.u[i * f..(i + 1) * f])
                    .map(|(g, &u)| g * gelu_grad(u))
                    .collect();
                for (gb, &v) in grads[bo.b1..bo.b1 + f].iter_mut().zip(&du) {
                    *gb += v;
                }
                let mut db = vec![0.0; d];
                matvec_backward(
                    &bt.b[i * d..(i + 1) * d],
                    &p[bo.w1..bo.w1 + d * f],
                    &du,
                    &mut db,
                    &mut grads[bo.w1..bo.w1 + d * f],
                );
                rmsnorm_backward(
                    &bt.mid[i * d..(i + 1) * d],
                    bt.inv2[i],
                    &p[bo.ln2..bo.ln2 + d],
                    &db,
                    &mut d_mid[i * d..(i + 1) * d],
                    &mut grads[bo.ln2..bo.ln2 + d],
                );
            }

            // Attention: mid = x_in + Wo attn(norm(x_in))
            let mut d_in = d_mid.clone();
            let mut d_o = vec![0.0; t_len * d];
            for i in 0..t_len {
                matvec_backward(
                    &bt.o[i * d..(i + 1) * d],
                    &p[bo.wo..bo.wo + d * d],
                    &d_mid[i * d..(i + 1) * d],
                    &mut d_o[i * d..(i + 1) * d],
                    &mut grads[bo.wo..bo.wo + d * d],
                );
            }
            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            for i in 0..t_len {
                let n = i + 1;
                let probs = &bt.probs[i];
                for h in 0..nh {
                    let ph = &probs[h * n..(h + 1) * n];
                    let doh = &d_o[i * d + h * dh..i * d + (h + 1) * dh];
                    let mut dp = vec![0.0; n];
                    for j in 0..n {
                        let vj = &bt.v[j * d + h * dh..j * d + (h + 1) * dh];
                        dp[j] = doh.iter().zip(vj).map(|(a, b)| a * b).sum();
                        for (dvc, &doc) in dv[j * d + h * dh..j * d + (h + 1) * dh].iter_mut().zip(doh) {
                            *dvc += ph[j] * doc;
                        }
                    }
                    let dot: f64 = ph.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        let ds = ph[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[i * d + h * dh + c] += ds * bt.k[j * d + h * dh + c];
                            dk[j * d + h * dh + c] += ds * bt.q[i * d + h * dh + c];
                        }
                    }
                }
            }
            for i in 0..t_len {
                let ai = &bt.a[i * d..(i + 1) * d];
                let mut da = vec![0.0; d];
                matvec_backward(ai, &p[bo.wq..bo.wq + d * d], &dq[i * d..(i + 1) * d], &mut da, &mut grads[bo.wq..bo.wq + d * d]);
                matvec_backward(ai, &p[bo.wk..bo.wk + d * d], &dk[i * d..(i + 1) * d], &mut da, &mut grads[bo.wk..bo.wk + d * d]);
                matvec_backward(ai, &p[bo.wv..bo.wv + d * d], &dv[i * d..(i + 1) * d], &mut da, &mut grads[bo.wv..bo.wv + d * d]);
                rmsnorm_backward(
                    &bt.x_in[i * d..(i + 1) * d],
                    bt.inv1[i],
                    &p[bo.ln1..bo.ln1 + d],
                    &da,
                    &mut d_in[i * d..(i + 1) * d],
                    &mut grads[bo.ln1..bo.ln1 + d],
                );
            }
            dx = d_in;
        }

        for (i, &t) in self.tokens.iter().enumerate() {
            let dxi = &dx[i * d..(i + 1) * d];
            for (g, &v) in grads[l.tok + t as usize * d..][..d].iter_mut().zip(dxi) {
                *g += v;
            }
            for (g, &v) in grads[l.pos + i * d..][..d].iter_mut().zip(dxi) {
                *g += v;
            }
        }
    }
}

/// Language-model head: logits for the hidden state at position `i`.
pub(crate) fn logits_at(a: &ArchConfig, p: &[f64], trace: &Trace, i: usize) -> Vec<f64> {
    let l = Layout::new(a);
    let v = a.vocab_size;
    let mut out = vec![0.0; v];
    matvec(trace.hidden_at(i), &p[l.lm_w..l.lm_w + a.d_model * v], v, &mut out);
    for (o, &b) in out.iter_mut().zip(&p[l.lm_b..l.lm_b + v]) {
        *o += b;
    }
    out
}

/// Accumulates the head gradient for `dlogits` at position `i` and returns
/// the gradient w.r.t. that hidden state.
fn logits_backward(a: &ArchConfig, p: &[f64], trace: &Trace, i: usize, dlogits: &[f64], grads: &mut [f64]) -> Vec<f64> {
    let l = Layout::new(a);
    let v = a.vocab_size;
    let mut dh = vec![0.0; a.d_model];
    matvec_backward(
        trace.hidden_at(i),
        &p[l.lm_w..l.lm_w + a.d_model * v],
        dlogits,
        &mut dh,
        &mut grads[l.lm_w..l.lm_w + a.d_model * v],
    );
    for (g, &dl) in grads[l.lm_b..l.lm_b + v].iter_mut().zip(dlogits) {
        *g += dl;
    }
    dh
}

/// Tokens a response may contain: EOS and the content range.
pub fn is_response_token(t: Token) -> bool {
    t == EOS || t as usize >= NUM_RESERVED
}

/// Log-softmax over the response alphabet; other entries are `-inf`.
pub(crate) fn response_log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled = |i: usize| logits[i] / temperature;
    let max = (0..logits.len())
        .filter(|&i| is_response_token(i as Token))
        .map(scaled)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + (0..logits.len())
            .filter(|&i| is_response_token(i as Token))
            .map(|i| (scaled(i) - max).exp())
            .sum::<f64>()
            .ln();
    (0..logits.len())
        .map(|i| {
            if is_response_token(i as Token) {
                scaled(i) - lse
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

fn full_log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn new(temperature: f64, max_len: usize, seed: u64) -> Self {
        SamplingConfig {
            temperature,
            max_len,
            seed,
        }
    }
}

/// A generated response without its EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: TokenSeq,
    /// False when generation hit `max_len` before emitting EOS.
    pub terminated: bool,
}

impl Sample {
    pub fn truncated(&self) -> bool {
        !self.terminated
    }

    /// The action sequence whose likelihood the generator assigned.
    pub fn actions(&self) -> TokenSeq {
        let mut a = self.tokens.clone();
        if self.terminated {
            a.push(EOS);
        }
        a
    }
}

/// Autoregressive generator: the policy or the improver.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel {
    pub arch: ArchConfig,
    pub params: Vec<f64>,
    pub vocab_hash: String,
}

impl SeqModel {
    pub fn new(arch: ArchConfig, vocab_hash: impl Into<String>, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = init_params(&arch, seed);
        Ok(SeqModel {
            arch,
            params,
            vocab_hash: vocab_hash.into(),
        })
    }

    pub fn from_params(arch: ArchConfig, vocab_hash: impl Into<String>, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                arch.param_count(),
                params.len()
            )));
        }
        Ok(SeqModel {
            arch,
            params,
            vocab_hash: vocab_hash.into(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Vocabulary implied by the architecture's vocabulary size.
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.arch.vocab_size - NUM_RESERVED).expect("validated arch has content tokens")
    }

    fn check_target(&self, context: &[Token], target: &[Token]) -> Result<()> {
        if context.is_empty() {
            return Err(Error::Empty("context"));
        }
        let len = context.len() + target.len();
        if len > self.arch.context_len {
            return Err(Error::Overlength {
                len,
                max: self.arch.context_len,
            });
        }
        if let Some(t) = target.iter().find(|&&t| !is_response_token(t)) {
            return Err(Error::InvalidInput(format!("target token {t} is not a response token")));
        }
        Ok(())
    }

    fn trace(&self, context: &[Token], target: &[Token]) -> Result<Trace> {
        let mut tr = Trace::new(&self.arch);
        tr.extend(&self.arch, &self.params, context)?;
        if let Some((_, head)) = target.split_last() {
            tr.extend(&self.arch, &self.params, head)?;
        }
        Ok(tr)
    }

    /// Next-token distribution over the whole vocabulary after `context`.
    /// Only response tokens carry mass.
    pub fn next_token_probs(&self, context: &[Token]) -> Result<Vec<f64>> {
        self.check_target(context, &[])?;
        let mut tr = Trace::new(&self.arch);
        tr.extend(&self.arch, &self.params, context)?;
        let logits = logits_at(&self.arch, &self.params, &tr, context.len() - 1);
        Ok(response_log_softmax(&logits, 1.0).into_iter().map(f64::exp).collect())
    }

    /// Per-token log-probabilities of `target` given `context`.
    pub fn token_log_probs(&self, context: &[Token], target: &[Token]) -> Result<Vec<f64>> {
        self.check_target(context, target)?;
        let tr = self.trace(context, target)?;
        Ok(target
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let logits = logits_at(&self.arch, &self.params, &tr, context.len() - 1 + k);
                response_log_softmax(&logits, 1.0)[t as usize]
            })
            .collect())
    }

    /// log M(target | context), summed over target tokens.
    pub fn log_prob(&self, context: &[Token], target: &[Token]) -> Result<f64> {
        Ok(self.token_log_probs(context, target)?.iter().sum())
    }

    /// Adds `scale * d log_prob / d params` into `grads`; returns the log-prob.
    pub fn log_prob_grad(&self, context: &[Token], target: &[Token], scale: f64, grads: &mut [f64]) -> Result<f64> {
        self.check_target(context, target)?;
        if target.is_empty() {
            return Ok(0.0);
        }
        let tr = self.trace(context, target)?;
        let d = self.arch.d_model;
        let mut d_hidden = vec![0.0; tr.len() * d];
        let mut total = 0.0;
        for (k, &t) in target.iter().enumerate() {
            let pos = context.len() - 1 + k;
            let logits = logits_at(&self.arch, &self.params, &tr, pos);
            let lp = response_log_softmax(&logits, 1.0);
            total += lp[t as usize];
            let dlogits: Vec<f64> = lp
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    let p = if l.is_finite() { l.exp() } else { 0.0 };
                    scale * (if i == t as usize { 1.0 } else { 0.0 } - p)
                })
                .collect();
            let dh = logits_backward(&self.arch, &self.params, &tr, pos, &dlogits, grads);
            for (acc, v) in d_hidden[pos * d..(pos + 1) * d].iter_mut().zip(dh) {
                *acc += v;
            }
        }
        tr.backward(&self.arch, &self.params, &d_hidden, grads);
        Ok(total)
    }

    /// Full-vocabulary next-token log-likelihood of a raw sequence (the
    /// unconditional pretraining objective). Adds `scale * gradient`.
    pub fn sequence_log_likelihood_grad(&self, seq: &[Token], scale: f64, grads: Option<&mut [f64]>) -> Result<f64> {
        if seq.len() < 2 {
            return Err(Error::InvalidInput("sequence needs at least two tokens".into()));
        }
        if seq.len() > self.arch.context_len {
            return Err(Error::Overlength {
                len: seq.len(),
                max: self.arch.context_len,
            });
        }
        let mut tr = Trace::new(&self.arch);
        tr.extend(&self.arch, &self.params, &seq[..seq.len() - 1])?;
        let d = self.arch.d_model;
        let mut total = 0.0;
        let mut d_hidden = vec![0.0; tr.len() * d];
        let mut grads = grads;
        for pos in 0..seq.len() - 1 {
            let t = seq[pos + 1] as usize;
            let logits = logits_at(&self.arch, &self.params, &tr, pos);
            let lp = full_log_softmax(&logits);
            total += lp[t];
            if let Some(g) = grads.as_deref_mut() {
                let dlogits: Vec<f64> = lp
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| scale * (if i == t { 1.0 } else { 0.0 } - l.exp()))
                    .collect();
                let dh = logits_backward(&self.arch, &self.params, &tr, pos, &dlogits, g);
                d_hidden[pos * d..(pos + 1) * d].copy_from_slice(&dh);
            }
        }
        if let Some(g) = grads {
            tr.backward(&self.arch, &self.params, &d_hidden, g);
        }
        Ok(total)
    }

    pub fn sample(&self, context: &[Token], cfg: &SamplingConfig) -> Result<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        self.sample_with(context, cfg.temperature, cfg.max_len, &mut rng)
    }

    /// Samples with logits divided by `temperature`; zero means greedy.
    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        context: &[Token],
        temperature: f64,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Sample> {
        if !(temperature >= 0.0) {
            return Err(Error::InvalidInput(format!("temperature {temperature} must be >= 0")));
        }
        if max_len == 0 {
            return Err(Error::InvalidInput("max_len must be positive".into()));
        }
        if context.is_empty() {
            return Err(Error::Empty("context"));
        }
        if context.len() + max_len > self.arch.context_len {
            return Err(Error::Overlength {
                len: context.len() + max_len,
                max: self.arch.context_len,
            });
        }
        let mut tr = Trace::new(&self.arch);
        tr.extend(&self.arch, &self.params, context)?;
        let mut out = Vec::with_capacity(max_len);
        loop {
            let logits = logits_at(&self.arch, &self.params, &tr, tr.len() - 1);
            let tok = if temperature == 0.0 {
                argmax_response(&logits)
            } else {
                let lp = response_log_softmax(&logits, temperature);
                draw(&lp, rng)
            };
            if tok == EOS {
                return Ok(Sample {
                    tokens: out,
                    terminated: true,
                });
            }
            out.push(tok);
            if out.len() == max_len {
                return Ok(Sample {
                    tokens: out,
                    terminated: false,
                });
            }
            tr.push(&self.arch, &self.params, tok)?;
        }
    }
}

fn argmax_response(logits: &[f64]) -> Token {
    let mut best = EOS;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &z) in logits.iter().enumerate() {
        if is_response_token(i as Token) && z > best_v {
            best_v = z;
            best = i as Token;
        }
    }
    best
}

fn draw<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> Token {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = EOS;
    for (i, &lp) in log_probs.iter().enumerate() {
        if !lp.is_finite() {
            continue;
        }
        acc += lp.exp();
        last = i as Token;
        if u < acc {
            return i as Token;
        }
    }
    last
}

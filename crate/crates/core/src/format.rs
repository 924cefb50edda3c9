//! Input layouts shared by the generators and the reward models.
//!
//! | model            | layout                                   |
//! |------------------|------------------------------------------|
//! | policy           | `BOS HUM x ASST`                         |
//! | improver         | `BOS HUM x ASST CAND y_ref IMPR`         |
//! | policy reward    | `BOS HUM x ASST y`                       |
//! | gap reward       | `BOS HUM x ASST CAND y2 IMPR y1`         |

use crate::error::{Error, Result};
use crate::vocab::{Token, TokenSeq, Vocab, ASST, BOS, CAND, HUM, IMPR};

pub fn format_policy_input(x: &[Token], vocab: &Vocab) -> Result<TokenSeq> {
    if x.is_empty() {
        return Err(Error::InvalidInput("empty instruction".into()));
    }
    vocab.check_content(x, "instruction")?;
    let mut out = Vec::with_capacity(x.len() + 3);
    out.extend([BOS, HUM]);
    out.extend_from_slice(x);
    out.push(ASST);
    Ok(out)
}

pub fn format_pit_input(x: &[Token], y_ref: &[Token], vocab: &Vocab) -> Result<TokenSeq> {
    if y_ref.is_empty() {
        return Err(Error::InvalidInput("the improver needs a non-empty candidate".into()));
    }
    vocab.check_content(y_ref, "candidate")?;
    let mut out = format_policy_input(x, vocab)?;
    out.push(CAND);
    out.extend_from_slice(y_ref);
    out.push(IMPR);
    Ok(out)
}

pub fn format_reward_input(x: &[Token], y: &[Token], vocab: &Vocab) -> Result<TokenSeq> {
    vocab.check_content(y, "response")?;
    let mut out = format_policy_input(x, vocab)?;
    out.extend_from_slice(y);
    Ok(out)
}

/// Scores how much `improved` betters `candidate`. Either response may be
/// empty here, unlike the improver input.
pub fn format_gap_input(
    x: &[Token],
    improved: &[Token],
    candidate: &[Token],
    vocab: &Vocab,
) -> Result<TokenSeq> {
    vocab.check_content(improved, "improved response")?;
    vocab.check_content(candidate, "candidate")?;
    let mut out = format_policy_input(x, vocab)?;
    out.push(CAND);
    out.extend_from_slice(candidate);
    out.push(IMPR);
    out.extend_from_slice(improved);
    Ok(out)
}

pub fn parse_policy_input(seq: &[Token]) -> Result<TokenSeq> {
    match seq {
        [BOS, HUM, x @ .., ASST] if !x.is_empty() && !x.contains(&ASST) => Ok(x.to_vec()),
        _ => Err(Error::Parse("not a policy input".into())),
    }
}

pub fn parse_pit_input(seq: &[Token]) -> Result<(TokenSeq, TokenSeq)> {
    let asst = seq
        .iter()
        .position(|&t| t == ASST)
        .ok_or_else(|| Error::Parse("missing ASST".into()))?;
    let x = parse_policy_input(&seq[..=asst])?;
    match &seq[asst + 1..] {
        [CAND, y @ .., IMPR] if !y.is_empty() => Ok((x, y.to_vec())),
        _ => Err(Error::Parse("missing CAND .. IMPR framing".into())),
    }
}

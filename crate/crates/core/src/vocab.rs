//! Token vocabulary with reserved special tokens.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Token = u32;
pub type TokenSeq = Vec<Token>;

pub const BOS: Token = 0;
pub const EOS: Token = 1;
/// Marks the start of the prompt ("Human:").
pub const HUM: Token = 2;
/// Marks the start of the assistant turn ("Assistant:").
pub const ASST: Token = 3;
/// Opens the candidate response in the improver layout.
pub const CAND: Token = 4;
/// Opens the improved response in the improver layout.
pub const IMPR: Token = 5;

pub const NUM_RESERVED: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    content_tokens: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab { content_tokens: 32 }
    }
}

impl Vocab {
    pub fn new(content_tokens: usize) -> Result<Self> {
        if content_tokens == 0 {
            return Err(Error::Config("vocabulary needs at least one content token".into()));
        }
        Ok(Vocab { content_tokens })
    }

    pub fn size(&self) -> usize {
        NUM_RESERVED + self.content_tokens
    }

    pub fn content_count(&self) -> usize {
        self.content_tokens
    }

    pub fn reserved(&self) -> [(&'static str, Token); NUM_RESERVED] {
        [
            ("BOS", BOS),
            ("EOS", EOS),
            ("HUM", HUM),
            ("ASST", ASST),
            ("CAND", CAND),
            ("IMPR", IMPR),
        ]
    }

    pub fn content_ids(&self) -> impl Iterator<Item = Token> + '_ {
        (NUM_RESERVED as Token)..(self.size() as Token)
    }

    pub fn is_content(&self, t: Token) -> bool {
        (t as usize) >= NUM_RESERVED && (t as usize) < self.size()
    }

    pub fn is_reserved(&self, t: Token) -> bool {
        (t as usize) < NUM_RESERVED
    }

    /// Stable hash binding checkpoints and datasets to this vocabulary.
    pub fn hash(&self) -> String {
        let manifest = self.manifest();
        let bytes = serde_json::to_vec(&manifest.without_hash()).expect("vocab manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn manifest(&self) -> VocabManifest {
        let reserved = self
            .reserved()
            .iter()
            .map(|(name, id)| ReservedToken {
                name: name.to_string(),
                id: *id,
            })
            .collect();
        let mut m = VocabManifest {
            reserved,
            content_tokens: self.content_tokens,
            hash: String::new(),
        };
        let bytes = serde_json::to_vec(&m.without_hash()).expect("vocab manifest serializes");
        m.hash = hex::encode(Sha256::digest(&bytes));
        m
    }

    /// Rejects any token outside the content range.
    pub fn check_content(&self, seq: &[Token], what: &str) -> Result<()> {
        match seq.iter().find(|&&t| !self.is_content(t)) {
            Some(t) => Err(Error::InvalidInput(format!(
                "{what} contains non-content token {t}"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservedToken {
    pub name: String,
    pub id: Token,
}

/// Companion file written next to every dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabManifest {
    pub reserved: Vec<ReservedToken>,
    pub content_tokens: usize,
    pub hash: String,
}

impl VocabManifest {
    fn without_hash(&self) -> serde_json::Value {
        serde_json::json!({
            "reserved": self.reserved,
            "content_tokens": self.content_tokens,
        })
    }

    pub fn to_vocab(&self) -> Result<Vocab> {
        let vocab = Vocab::new(self.content_tokens)?;
        if vocab.hash() != self.hash {
            return Err(Error::VocabMismatch {
                expected: vocab.hash(),
                found: self.hash.clone(),
            });
        }
        Ok(vocab)
    }
}

/// Strips a single trailing EOS, if present.
pub fn strip_eos(seq: &[Token]) -> &[Token] {
    match seq.split_last() {
        Some((&EOS, rest)) => rest,
        _ => seq,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_distinct_and_not_content() {
        let v = Vocab::default();
        let ids: Vec<Token> = v.reserved().iter().map(|r| r.1).collect();
        let mut dedup = ids.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), NUM_RESERVED);
        assert!(ids.iter().all(|&t| !v.is_content(t)));
        assert_eq!(v.size(), 38);
        assert_eq!(v.content_ids().count(), 32);
    }

    #[test]
    fn manifest_round_trips_and_detects_tampering() {
        let v = Vocab::default();
        let mut m = v.manifest();
        assert_eq!(m.to_vocab().unwrap(), v);
        m.content_tokens = 31;
        assert!(matches!(m.to_vocab(), Err(Error::VocabMismatch { .. })));
    }

    #[test]
    fn strip_eos_only_removes_trailing() {
        assert_eq!(strip_eos(&[7, 8, EOS]), &[7, 8]);
        assert_eq!(strip_eos(&[7, 8]), &[7, 8]);
        assert_eq!(strip_eos(&[]), &[] as &[Token]);
    }
}

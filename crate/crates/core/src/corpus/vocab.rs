use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::dataset::DialogueSample;
use crate::error::{MimeError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const CTX: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<sos>", "<eos>", "<ctx>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect()).expect("reserved tokens are distinct")
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = MimeError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Full id-ordered token list, reserved entries included.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(MimeError::Invalid("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(MimeError::Invalid(format!("token {t:?} appears twice in the vocabulary")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Counts each utterance once per conversation even though it appears in
    /// several samples, then orders by frequency (descending) and token.
    pub fn build(samples: &[DialogueSample], min_freq: usize) -> Self {
        let mut seen: HashSet<(&str, usize)> = HashSet::new();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in samples {
            let turns = s
                .context
                .iter()
                .map(|u| (u.turn, &u.tokens))
                .chain(std::iter::once((s.response_turn, &s.response)));
            for (turn, tokens) in turns {
                if seen.insert((&s.conv_id, turn)) {
                    for t in tokens {
                        *counts.entry(t.as_str()).or_default() += 1;
                    }
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Self::from_tokens(tokens).expect("counted tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

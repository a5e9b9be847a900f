//! Turn bookkeeping shared by `generate` and `chat`.

use mime::context::ContextBatch;
use mime::corpus::{flatten_context, tokenize, Speaker, Utterance, Vocabulary};
use mime::{MimeError, Result};

/// Utterances in order; the most recent one is always the user's.
#[derive(Debug, Default, Clone)]
pub struct Dialogue {
    turns: Vec<Vec<String>>,
}

impl Dialogue {
    /// Parses `"u1 || u2 || ..."`.
    pub fn parse(text: &str) -> Result<Self> {
        let turns: Vec<Vec<String>> = text.split("||").map(tokenize).collect();
        if turns.iter().any(Vec::is_empty) {
            return Err(MimeError::Invalid("context has an empty utterance".into()));
        }
        Ok(Self { turns })
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn push(&mut self, tokens: Vec<String>) {
        self.turns.push(tokens);
    }

    /// Speakers are assigned backwards from the final user turn.
    pub fn utterances(&self) -> Vec<Utterance> {
        let n = self.turns.len();
        self.turns
            .iter()
            .enumerate()
            .map(|(turn, tokens)| Utterance {
                speaker: if (n - 1 - turn) % 2 == 0 { Speaker::User } else { Speaker::Agent },
                turn,
                tokens: tokens.clone(),
            })
            .collect()
    }

    pub fn context(&self, vocab: &Vocabulary, max_len: usize) -> Result<ContextBatch> {
        if self.turns.is_empty() {
            return Err(MimeError::Invalid("empty context".into()));
        }
        let (tokens, speakers) = flatten_context(&self.utterances(), vocab, max_len);
        ContextBatch::from_rows(&[(&tokens, &speakers)])
    }
}

//! Context encoding: embedding sum, the prepended CTX summary token and the
//! emotion classifier reading that summary.

use autodiff::{Element, ParamId, ParamStore, Tape, Var};
use rand::Rng;

use crate::corpus::{CTX, NUM_SPEAKERS, PAD, SPEAKER_CTX};
use crate::emotion::{EmotionGrouping, Polarity, NUM_EMOTIONS};
use crate::error::{MimeError, Result};
use crate::layers::{BlockSpec, Dropout, EmbeddingTable, TransformerEncoder};

/// Padded token/speaker ids `[batch, len]` with CTX at position 0 of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBatch {
    pub batch: usize,
    pub len: usize,
    pub tokens: Vec<usize>,
    pub speakers: Vec<usize>,
    pub valid: Vec<bool>,
}

impl ContextBatch {
    /// Rows hold context tokens and their speaker ids, without CTX.
    pub fn from_rows(rows: &[(&[usize], &[usize])]) -> Result<Self> {
        if rows.is_empty() {
            return Err(MimeError::Invalid("context batch needs at least one row".into()));
        }
        let len = rows.iter().map(|(t, _)| t.len()).max().unwrap_or(0) + 1;
        let mut out = Self {
            batch: rows.len(),
            len,
            tokens: vec![PAD; rows.len() * len],
            speakers: vec![SPEAKER_CTX; rows.len() * len],
            valid: vec![false; rows.len() * len],
        };
        for (b, (tokens, speakers)) in rows.iter().enumerate() {
            if tokens.len() != speakers.len() {
                return Err(MimeError::Invalid(format!(
                    "row {b}: {} tokens but {} speaker ids",
                    tokens.len(),
                    speakers.len()
                )));
            }
            if let Some(s) = speakers.iter().find(|&&s| s == SPEAKER_CTX || s >= NUM_SPEAKERS) {
                return Err(MimeError::Invalid(format!("row {b}: speaker id {s} is not a dialogue role")));
            }
            let row = b * len;
            out.tokens[row] = CTX;
            out.valid[row] = true;
            out.tokens[row + 1..row + 1 + tokens.len()].copy_from_slice(tokens);
            out.speakers[row + 1..row + 1 + tokens.len()].copy_from_slice(speakers);
            out.valid[row + 1..row + 1 + tokens.len()].fill(true);
        }
        Ok(out)
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|_| 0..self.len).collect()
    }

    pub fn row(&self, b: usize) -> Result<Self> {
        if b >= self.batch {
            return Err(MimeError::Invalid(format!("row {b} of a batch of {}", self.batch)));
        }
        let r = b * self.len..(b + 1) * self.len;
        Ok(Self {
            batch: 1,
            len: self.len,
            tokens: self.tokens[r.clone()].to_vec(),
            speakers: self.speakers[r.clone()].to_vec(),
            valid: self.valid[r].to_vec(),
        })
    }
}

/// Word, position and speaker tables. The decoder reuses word and position.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub word: EmbeddingTable,
    pub position: EmbeddingTable,
    pub speaker: EmbeddingTable,
}

impl Embeddings {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        positions: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            word: EmbeddingTable::new(store, "embed.word", vocab_size, dim, rng)?,
            position: EmbeddingTable::new(store, "embed.position", positions, dim, rng)?,
            speaker: EmbeddingTable::new(store, "embed.speaker", NUM_SPEAKERS, dim, rng)?,
        })
    }

    /// Sum of the three embeddings, `[batch, len, dim]`.
    pub fn embed_context<T: Element>(&self, tape: &mut Tape<T>, ctx: &ContextBatch) -> Result<Var> {
        let prefix = [ctx.batch, ctx.len];
        let w = self.word.lookup(tape, &ctx.tokens, &prefix)?;
        let p = self.position.lookup(tape, &ctx.positions(), &prefix)?;
        let s = self.speaker.lookup(tape, &ctx.speakers, &prefix)?;
        let ws = tape.add(w, p)?;
        Ok(tape.add(ws, s)?)
    }

    /// Word plus position embedding for decoder inputs `[batch, len]`.
    pub fn embed_target<T: Element>(&self, tape: &mut Tape<T>, tokens: &[usize], batch: usize) -> Result<Var> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(MimeError::Invalid(format!("{} target ids for a batch of {batch}", tokens.len())));
        }
        let len = tokens.len() / batch;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let w = self.word.lookup(tape, tokens, &[batch, len])?;
        let p = self.position.lookup(tape, &positions, &[batch, len])?;
        Ok(tape.add(w, p)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncodedContext {
    /// Contextualized tokens `[batch, len, dim]`.
    pub hidden: Var,
    /// The CTX row of `hidden`, `[batch, dim]`.
    pub summary: Var,
}

#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub encoder: TransformerEncoder,
}

impl ContextEncoder {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        layers: usize,
        dims: BlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            encoder: TransformerEncoder::new(store, "context_encoder", layers, dims, rng)?,
        })
    }

    pub fn encode<T: Element>(
        &self,
        tape: &mut Tape<T>,
        embeddings: &Embeddings,
        ctx: &ContextBatch,
        drop: &mut Dropout,
    ) -> Result<EncodedContext> {
        let x = embeddings.embed_context(tape, ctx)?;
        let hidden = self.encoder.forward(tape, x, &ctx.valid, drop)?;
        let first = tape.slice(hidden, 1, 0, 1)?;
        let summary = tape.reshape(first, &[ctx.batch, self.encoder.width])?;
        Ok(EncodedContext { hidden, summary })
    }
}

/// Bilinear scorer between the context summary and every emotion embedding.
/// The emotion table is shared with the sampling path.
#[derive(Debug, Clone)]
pub struct EmotionClassifier {
    pub projection: ParamId,
    pub emotions: EmbeddingTable,
}

impl EmotionClassifier {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        emotions: EmbeddingTable,
        rng: &mut R,
    ) -> Result<Self> {
        let d = emotions.dim;
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            projection: store.add_uniform("classifier.projection", &[d, d], bound, rng)?,
            emotions,
        })
    }

    /// `logits[b, i] = emotion_i . (W summary_b)`, shape `[batch, 32]`.
    pub fn logits<T: Element>(&self, tape: &mut Tape<T>, summary: Var) -> Result<Var> {
        let w = tape.param(self.projection)?;
        let wt = tape.transpose(w)?;
        let projected = tape.matmul(summary, wt)?;
        let table = self.emotions.all(tape)?;
        let table_t = tape.transpose(table)?;
        Ok(tape.matmul(projected, table_t)?)
    }

    pub fn loss<T: Element>(&self, tape: &mut Tape<T>, logits: Var, gold: &[usize]) -> Result<Var> {
        if let Some(&bad) = gold.iter().find(|&&e| e >= NUM_EMOTIONS) {
            return Err(MimeError::LabelOutOfRange(bad));
        }
        let targets: Vec<Option<usize>> = gold.iter().map(|&e| Some(e)).collect();
        Ok(tape.cross_entropy(logits, &targets)?)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
pub enum PolaritySource<'a> {
    /// Gold label, used while training.
    Gold(usize),
    /// Predicted emotion distribution, used at inference.
    Predicted(&'a [f64]),
}

pub fn infer_polarity(grouping: &EmotionGrouping, source: PolaritySource<'_>) -> Polarity {
    match source {
        PolaritySource::Gold(e) => grouping.polarity(e),
        PolaritySource::Predicted(p) => grouping.polarity(argmax(p)),
    }
}

//! Response decoding: the transformer decoder over (context keys, fused
//! values), the generation loss and greedy/beam search.

use std::cmp::Ordering;

use autodiff::{Element, ParamStore, Tape, Var};
use rand::Rng;

use crate::context::Embeddings;
use crate::corpus::PAD;
use crate::error::{MimeError, Result};
use crate::layers::{AttentionMask, BlockSpec, Dropout, FullyConnected, TransformerDecoder};

#[derive(Debug, Clone)]
pub struct ResponseDecoder {
    pub decoder: TransformerDecoder,
    /// Projection to vocabulary logits; not tied to the word embeddings.
    pub output: FullyConnected,
}

impl ResponseDecoder {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        layers: usize,
        dims: BlockSpec,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            decoder: TransformerDecoder::new(store, "decoder", layers, dims, rng)?,
            output: FullyConnected::new(store, "decoder.output", dims.width, vocab_size, rng)?,
        })
    }

    /// Logits `[B, T, V]` for decoder inputs `[B, T]` (row-major ids).
    #[allow(clippy::too_many_arguments)]
    pub fn logits<T: Element>(
        &self,
        tape: &mut Tape<T>,
        embeddings: &Embeddings,
        inputs: &[usize],
        batch: usize,
        keys: Var,
        values: Var,
        memory_valid: &[bool],
        drop: &mut Dropout,
    ) -> Result<Var> {
        if inputs.is_empty() {
            return Err(MimeError::Invalid("decoder needs at least one input position".into()));
        }
        let x = embeddings.embed_target(tape, inputs, batch)?;
        let len = inputs.len() / batch;
        let mask = AttentionMask::causal(batch, len);
        let o = self
            .decoder
            .forward(tape, x, keys, values, &mask, memory_valid, drop)?;
        self.output.forward(tape, o)
    }
}

/// Mean token cross-entropy over non-PAD targets.
pub fn generation_loss<T: Element>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let v = *shape.last().unwrap_or(&0);
    let rows = targets.len();
    if v == 0 || shape.iter().product::<usize>() != rows * v {
        return Err(MimeError::Invalid(format!("{rows} targets for logits {shape:?}")));
    }
    if targets.iter().all(|&t| t == PAD) {
        return Err(MimeError::Invalid("response targets are all padding".into()));
    }
    let flat = tape.reshape(logits, &[rows, v])?;
    let t: Vec<Option<usize>> = targets.iter().map(|&t| (t != PAD).then_some(t)).collect();
    Ok(tape.cross_entropy(flat, &t)?)
}

/// Log-softmax of one row, computed in double precision.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Next-token log-probabilities for a set of equal-length prefixes.
pub trait StepScorer {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub sos: usize,
    pub eos: usize,
    pub max_len: usize,
    pub beam: usize,
    /// Ranking score is `log_prob / len^penalty`; 0 ranks by raw log-probability.
    pub length_penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids after the start token, including EOS when emitted.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    pub fn response(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    fn rank_score(&self, penalty: f64) -> f64 {
        if penalty == 0.0 {
            self.log_prob
        } else {
            self.log_prob / (self.tokens.len().max(1) as f64).powf(penalty)
        }
    }
}

fn check_config(cfg: &SearchConfig) -> Result<()> {
    if cfg.max_len == 0 || cfg.beam == 0 {
        return Err(MimeError::Invalid("max_len and beam must be at least 1".into()));
    }
    Ok(())
}

/// Picks the most likely token at each step (lowest id on ties) until EOS
/// or `max_len` tokens.
pub fn greedy_decode<S: StepScorer + ?Sized>(scorer: &mut S, cfg: &SearchConfig) -> Result<Hypothesis> {
    check_config(cfg)?;
    let mut prefix = vec![cfg.sos];
    let mut log_prob = 0.0;
    for _ in 0..cfg.max_len {
        let lp = scorer.next_log_probs(std::slice::from_ref(&prefix))?.remove(0);
        let best = crate::context::argmax(&lp);
        log_prob += lp[best];
        prefix.push(best);
        if best == cfg.eos {
            break;
        }
    }
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        log_prob,
    })
}

fn compare(a: &(Hypothesis, bool), b: &(Hypothesis, bool), penalty: f64) -> Ordering {
    b.0.rank_score(penalty)
        .total_cmp(&a.0.rank_score(penalty))
        .then_with(|| a.0.tokens.cmp(&b.0.tokens))
}

/// Length-synchronized beam search. Finished hypotheses stay in the pool
/// and compete with the expansions of active ones; a hypothesis reaching
/// `max_len` tokens without EOS counts as finished. Returns the best
/// finished hypothesis.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &mut S, cfg: &SearchConfig) -> Result<Hypothesis> {
    check_config(cfg)?;
    // (hypothesis, finished)
    let mut pool: Vec<(Hypothesis, bool)> = vec![(
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
        },
        false,
    )];
    for step in 0..cfg.max_len {
        let (active, mut next): (Vec<_>, Vec<_>) = pool.into_iter().partition(|(_, done)| !done);
        if active.is_empty() {
            pool = next;
            break;
        }
        let prefixes: Vec<Vec<usize>> = active
            .iter()
            .map(|(h, _)| std::iter::once(cfg.sos).chain(h.tokens.iter().copied()).collect())
            .collect();
        let scores = scorer.next_log_probs(&prefixes)?;
        for ((h, _), lp) in active.iter().zip(scores) {
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                let done = tok == cfg.eos || step + 1 == cfg.max_len;
                next.push((
                    Hypothesis {
                        tokens,
                        log_prob: h.log_prob + l,
                    },
                    done,
                ));
            }
        }
        next.sort_by(|a, b| compare(a, b, cfg.length_penalty));
        next.truncate(cfg.beam);
        pool = next;
    }
    pool.sort_by(|a, b| compare(a, b, cfg.length_penalty));
    pool.into_iter()
        .find(|(_, done)| *done)
        .map(|(h, _)| h)
        .ok_or_else(|| MimeError::Invalid("beam search finished without a hypothesis".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed table of next-token log-probabilities indexed by prefix length.
    struct Table(Vec<Vec<f64>>);

    impl StepScorer for Table {
        fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes.iter().map(|p| log_softmax(&self.0[p.len() - 1])).collect())
        }
    }

    fn cfg(beam: usize) -> SearchConfig {
        SearchConfig {
            sos: 0,
            eos: 3,
            max_len: 3,
            beam,
            length_penalty: 0.0,
        }
    }

    #[test]
    fn eos_first_gives_empty_response() {
        let mut s = Table(vec![vec![0., 0., 0., 10.]; 3]);
        let g = greedy_decode(&mut s, &cfg(1)).unwrap();
        assert_eq!(g.tokens, [3]);
        assert!(g.response(3).is_empty());
        assert_eq!(beam_search(&mut s, &cfg(5)).unwrap().tokens, [3]);
    }

    #[test]
    fn greedy_ties_take_lowest_id() {
        let mut s = Table(vec![vec![0., 1., 1., -5.]; 3]);
        assert_eq!(greedy_decode(&mut s, &cfg(1)).unwrap().tokens, [1, 1, 1]);
    }

    #[test]
    fn loss_ignores_padding_and_matches_hand_values() {
        let mut tape = Tape::<f64>::detached();
        let logits = tape.constant(autodiff::Tensor::from_f64(&[1, 3, 3], &[0., 0., 0., 1., 2., 3., 5., 5., 5.]).unwrap());
        let l = generation_loss(&mut tape, logits, &[1, 2, PAD]).unwrap();
        let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        let expected = ((3f64).ln() + (lse - 3.0)) / 2.0;
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
        assert!(generation_loss(&mut tape, logits, &[PAD; 3]).is_err());
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[1.0, 2.0, 3.0]);
        assert!((lp.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::dataset::{DialogueSample, Utterance};
use super::vocab::{Vocabulary, EOS, PAD, SOS};
use crate::context::ContextBatch;
use crate::error::{MimeError, Result};
use crate::MimeRng;

/// A sample mapped to ids, ready for batching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub context: Vec<usize>,
    pub speakers: Vec<usize>,
    pub response: Vec<usize>,
    pub emotion: usize,
}

/// Concatenates utterances in order with one speaker id per token. Only the
/// most recent `max_len` tokens are kept, so the final utterance survives
/// truncation whenever it fits.
pub fn flatten_context(utterances: &[Utterance], vocab: &Vocabulary, max_len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut tokens = Vec::new();
    let mut speakers = Vec::new();
    for u in utterances {
        tokens.extend(vocab.encode(&u.tokens));
        speakers.extend(std::iter::repeat_n(u.speaker.id(), u.tokens.len()));
    }
    let cut = tokens.len().saturating_sub(max_len);
    (tokens.split_off(cut), speakers.split_off(cut))
}

pub fn encode_sample(
    sample: &DialogueSample,
    vocab: &Vocabulary,
    max_context_len: usize,
    max_response_len: usize,
) -> EncodedSample {
    let (context, speakers) = flatten_context(&sample.context, vocab, max_context_len);
    let mut response = vocab.encode(&sample.response);
    response.truncate(max_response_len);
    EncodedSample {
        context,
        speakers,
        response,
        emotion: sample.emotion,
    }
}

pub fn encode_samples(
    samples: &[DialogueSample],
    vocab: &Vocabulary,
    max_context_len: usize,
    max_response_len: usize,
) -> Vec<EncodedSample> {
    samples
        .iter()
        .map(|s| encode_sample(s, vocab, max_context_len, max_response_len))
        .collect()
}

/// Padded contexts plus teacher-forcing inputs (`SOS r`) and targets
/// (`r EOS`), both `[size, response_len]` row-major with PAD fill.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub context: ContextBatch,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub response_len: usize,
    pub emotions: Vec<usize>,
}

impl Batch {
    pub fn new(samples: &[&EncodedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(MimeError::Invalid("cannot build an empty batch".into()));
        }
        let rows: Vec<(&[usize], &[usize])> = samples
            .iter()
            .map(|s| (s.context.as_slice(), s.speakers.as_slice()))
            .collect();
        let context = ContextBatch::from_rows(&rows)?;
        let response_len = samples.iter().map(|s| s.response.len()).max().unwrap_or(0) + 1;
        let mut inputs = vec![PAD; samples.len() * response_len];
        let mut targets = vec![PAD; samples.len() * response_len];
        for (b, s) in samples.iter().enumerate() {
            let row = b * response_len;
            inputs[row] = SOS;
            inputs[row + 1..row + 1 + s.response.len()].copy_from_slice(&s.response);
            targets[row..row + s.response.len()].copy_from_slice(&s.response);
            targets[row + s.response.len()] = EOS;
        }
        Ok(Self {
            context,
            inputs,
            targets,
            response_len,
            emotions: samples.iter().map(|s| s.emotion).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.emotions.len()
    }
}

/// Splits samples into batches, shuffled when a seed is given and in
/// original order otherwise. The last batch may be short.
pub fn make_batches(samples: &[EncodedSample], batch_size: usize, shuffle: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(MimeError::Invalid("batch size must be positive".into()));
    }
    let mut order: Vec<&EncodedSample> = samples.iter().collect();
    if let Some(seed) = shuffle {
        order.shuffle(&mut MimeRng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(Batch::new).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::dataset::Speaker;

    fn utt(turn: usize, words: &[&str]) -> Utterance {
        Utterance {
            speaker: Speaker::at_turn(turn),
            turn,
            tokens: words.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn vocab() -> Vocabulary {
        let mut t: Vec<String> = super::super::vocab::RESERVED.iter().map(|s| s.to_string()).collect();
        t.extend(["a", "b", "c", "d"].map(String::from));
        Vocabulary::from_tokens(t).unwrap()
    }

    #[test]
    fn flatten_marks_speakers_and_truncates_from_the_front() {
        let v = vocab();
        let us = [utt(0, &["a", "b"]), utt(1, &["c"]), utt(2, &["d", "a"])];
        let (t, s) = flatten_context(&us, &v, 100);
        assert_eq!(t, [5, 6, 7, 8, 5]);
        assert_eq!(s, [1, 1, 2, 1, 1]);
        let (t, s) = flatten_context(&us, &v, 3);
        assert_eq!(t, [7, 8, 5]);
        assert_eq!(s, [2, 1, 1]);
        let (t, _) = flatten_context(&us[..1], &v, 100);
        assert_eq!(t, v.encode(&us[0].tokens));
    }

    fn sample(n: usize) -> EncodedSample {
        EncodedSample {
            context: vec![5; n + 1],
            speakers: vec![1; n + 1],
            response: vec![6; n],
            emotion: n % 32,
        }
    }

    #[test]
    fn batch_sizes_and_padding() {
        let samples: Vec<_> = (0..33).map(sample).collect();
        let batches = make_batches(&samples, 16, Some(1)).unwrap();
        assert_eq!(batches.iter().map(Batch::size).collect::<Vec<_>>(), [16, 16, 1]);
        let again = make_batches(&samples, 16, Some(1)).unwrap();
        assert_eq!(batches, again);
        let ordered = make_batches(&samples, 16, None).unwrap();
        assert_eq!(ordered[0].emotions[..3], [0, 1, 2]);

        let b = Batch::new(&[&sample(2), &sample(0)]).unwrap();
        assert_eq!(b.response_len, 3);
        assert_eq!(b.inputs, [SOS, 6, 6, SOS, PAD, PAD]);
        assert_eq!(b.targets, [6, 6, EOS, EOS, PAD, PAD]);
        assert_eq!(b.context.len, 4);
        assert_eq!(b.context.valid, [true, true, true, true, true, true, false, false]);
    }
}

//! The full model: context encoding, emotion classification, grouped
//! emotion sampling with mimicry, fusion and response decoding.

use autodiff::{Element, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};

use crate::config::ModelConfig;
use crate::context::{argmax, ContextBatch, ContextEncoder, Embeddings, EmotionClassifier, PolaritySource};
use crate::corpus::{Batch, EOS, SOS};
use crate::decoder::{beam_search, generation_loss, greedy_decode, log_softmax, ResponseDecoder, SearchConfig, StepScorer};
use crate::emotion::{EmotionGrouping, Polarity, NUM_EMOTIONS};
use crate::error::{MimeError, Result};
use crate::layers::{BlockSpec, Dropout, EmbeddingTable};
use crate::mixture::{emotion_groups, EmotionMixture, MixtureInputs, MixtureOutput};
use crate::MimeRng;

/// How a forward pass samples and regularizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Posterior sample with noise, dropout on.
    Train,
    /// Posterior mean, no dropout. Used for validation loss.
    Validate,
}

/// Loss components as tape variables.
#[derive(Debug, Clone)]
pub struct Losses {
    pub classification: Var,
    /// One regularizer per emotion group.
    pub elbo: Vec<Var>,
    pub generation: Var,
    pub total: Var,
}

/// Loss components read back as numbers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub classification: f64,
    pub elbo: Vec<f64>,
    pub generation: f64,
}

impl LossValues {
    pub fn read<T: Element>(tape: &Tape<T>, l: &Losses) -> Self {
        let v = |x: Var| tape.value(x).item().as_f64();
        Self {
            total: v(l.total),
            classification: v(l.classification),
            elbo: l.elbo.iter().map(|&e| v(e)).collect(),
            generation: v(l.generation),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.classification.is_finite()
            && self.generation.is_finite()
            && self.elbo.iter().all(|e| e.is_finite())
    }

    /// Weighted recombination of the components.
    pub fn combined(&self, cfg: &ModelConfig) -> f64 {
        total_loss(
            self.classification,
            &self.elbo,
            self.generation,
            cfg.alpha,
            cfg.beta,
            cfg.gamma,
        )
    }
}

/// `alpha * cls + beta * sum(elbo) + gamma * resp`.
pub fn total_loss(cls: f64, elbo: &[f64], resp: f64, alpha: f64, beta: f64, gamma: f64) -> f64 {
    alpha * cls + beta * elbo.iter().sum::<f64>() + gamma * resp
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub emotion_logits: Var,
    pub response_logits: Var,
    pub mixture: MixtureOutput,
    pub losses: Losses,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: &'static str,
    /// `(emotion id, probability)` for every member, in member order.
    pub distribution: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub emotion_probs: Vec<f64>,
    pub emotion: usize,
    pub polarity: Polarity,
    pub groups: Vec<GroupReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub beam: usize,
    pub max_len: usize,
    pub length_penalty: f64,
    /// Use the prior mean instead of a random draw.
    pub deterministic: bool,
}

impl GenerateOptions {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            beam: cfg.beam,
            max_len: cfg.max_decode_len,
            length_penalty: cfg.length_penalty,
            deterministic: cfg.deterministic,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mime {
    pub config: ModelConfig,
    pub grouping: EmotionGrouping,
    pub vocab_size: usize,
    pub embeddings: Embeddings,
    pub context_encoder: ContextEncoder,
    pub classifier: EmotionClassifier,
    pub mixture: EmotionMixture,
    pub decoder: ResponseDecoder,
}

impl Mime {
    pub fn new<T: Element, R: Rng + ?Sized>(
        config: ModelConfig,
        grouping: EmotionGrouping,
        vocab_size: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let dims = BlockSpec {
            width: config.hidden,
            heads: config.heads,
            ffn: config.ffn(),
            eps: config.layer_norm_eps,
        };
        let d = config.hidden;
        let embeddings = Embeddings::new(store, vocab_size, config.position_rows(), d, rng)?;
        let emotions = EmbeddingTable::new(store, "embed.emotion", NUM_EMOTIONS, d, rng)?;
        let context_encoder = ContextEncoder::new(store, config.encoder_layers, dims, rng)?;
        let classifier = EmotionClassifier::new(store, emotions, rng)?;
        let groups = emotion_groups(&grouping, config.grouping);
        let mixture = EmotionMixture::new(store, groups, emotions, config.mimicry, config.encoder_layers, dims, rng)?;
        let decoder = ResponseDecoder::new(store, config.decoder_layers, dims, vocab_size, rng)?;
        Ok(Self {
            config,
            grouping,
            vocab_size,
            embeddings,
            context_encoder,
            classifier,
            mixture,
            decoder,
        })
    }

    /// Fresh parameters seeded from `config.seed`.
    pub fn init<T: Element>(config: ModelConfig, grouping: EmotionGrouping, vocab_size: usize) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = MimeRng::seed_from_u64(config.seed);
        let model = Self::new(config, grouping, vocab_size, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// Teacher-forced pass over a batch with all loss terms.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, batch: &Batch, mode: Mode, rng: &mut MimeRng) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let mut drop = match mode {
            Mode::Train if cfg.dropout > 0.0 => Dropout::new(cfg.dropout, MimeRng::seed_from_u64(rng.random())),
            _ => Dropout::disabled(),
        };
        let ctx = &batch.context;
        let encoded = self.context_encoder.encode(tape, &self.embeddings, ctx, &mut drop)?;
        let emotion_logits = self.classifier.logits(tape, encoded.summary)?;
        let classification = self.classifier.loss(tape, emotion_logits, &batch.emotions)?;

        let polarity: Vec<Polarity> = batch
            .emotions
            .iter()
            .map(|&e| crate::context::infer_polarity(&self.grouping, PolaritySource::Gold(e)))
            .collect();
        let inputs = MixtureInputs {
            gold: Some(&batch.emotions),
            polarity: &polarity,
            noise: (mode == Mode::Train).then_some(&mut *rng),
            reconstruction: cfg.reconstruction,
        };
        let mixture = self.mixture.forward(tape, encoded, &ctx.valid, inputs, &mut drop)?;

        let response_logits = self.decoder.logits(
            tape,
            &self.embeddings,
            &batch.inputs,
            batch.size(),
            encoded.hidden,
            mixture.fusion.fused,
            &ctx.valid,
            &mut drop,
        )?;
        let generation = generation_loss(tape, response_logits, &batch.targets)?;

        let mut total = tape.scale(classification, cfg.alpha)?;
        for &e in &mixture.elbo {
            let w = tape.scale(e, cfg.beta)?;
            total = tape.add(total, w)?;
        }
        let g = tape.scale(generation, cfg.gamma)?;
        total = tape.add(total, g)?;
        let losses = Losses {
            classification,
            elbo: mixture.elbo.clone(),
            generation,
            total,
        };
        Ok(ForwardOutput {
            emotion_logits,
            response_logits,
            mixture,
            losses,
        })
    }

    /// Loss values of a batch without building gradients.
    pub fn evaluate_batch<T: Element>(&self, store: &ParamStore<T>, batch: &Batch) -> Result<(LossValues, Vec<Vec<f64>>)> {
        let mut tape = Tape::no_grad(store);
        let mut rng = MimeRng::seed_from_u64(0);
        let out = self.forward(&mut tape, batch, Mode::Validate, &mut rng)?;
        Ok((LossValues::read(&tape, &out.losses), probabilities(&tape, out.emotion_logits)))
    }

    /// Emotion distributions for every context in the batch.
    pub fn emotion_probabilities<T: Element>(&self, store: &ParamStore<T>, ctx: &ContextBatch) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::no_grad(store);
        let encoded = self
            .context_encoder
            .encode(&mut tape, &self.embeddings, ctx, &mut Dropout::disabled())?;
        let logits = self.classifier.logits(&mut tape, encoded.summary)?;
        Ok(probabilities(&tape, logits))
    }

    /// Decodes a response for a single context. The emotion draw is made
    /// once and shared by every beam hypothesis.
    pub fn generate<T: Element>(
        &self,
        store: &ParamStore<T>,
        ctx: &ContextBatch,
        opts: &GenerateOptions,
        rng: &mut MimeRng,
    ) -> Result<Generation> {
        if ctx.batch != 1 {
            return Err(MimeError::Invalid("generate expects a single context".into()));
        }
        let mut tape = Tape::no_grad(store);
        let mut drop = Dropout::disabled();
        let encoded = self.context_encoder.encode(&mut tape, &self.embeddings, ctx, &mut drop)?;
        let logits = self.classifier.logits(&mut tape, encoded.summary)?;
        let emotion_probs = probabilities(&tape, logits).remove(0);
        let emotion = argmax(&emotion_probs);
        let polarity = crate::context::infer_polarity(&self.grouping, PolaritySource::Predicted(&emotion_probs));
        let inputs = MixtureInputs {
            gold: None,
            polarity: &[polarity],
            noise: (!opts.deterministic).then_some(rng),
            reconstruction: false,
        };
        let mixture = self.mixture.forward(&mut tape, encoded, &ctx.valid, inputs, &mut drop)?;
        let groups = self
            .mixture
            .groups
            .iter()
            .zip(&mixture.samples)
            .map(|(g, s)| GroupReport {
                name: g.name,
                distribution: g
                    .members
                    .iter()
                    .copied()
                    .zip(tape.value(s.distribution).to_f64_vec())
                    .collect(),
            })
            .collect();

        let mut scorer = ModelScorer {
            model: self,
            store,
            hidden: tape.value(encoded.hidden).clone(),
            fused: tape.value(mixture.fusion.fused).clone(),
            valid: ctx.valid.clone(),
        };
        let search = SearchConfig {
            sos: SOS,
            eos: EOS,
            max_len: opts.max_len,
            beam: opts.beam,
            length_penalty: opts.length_penalty,
        };
        let best = if opts.beam == 1 {
            greedy_decode(&mut scorer, &search)?
        } else {
            beam_search(&mut scorer, &search)?
        };
        Ok(Generation {
            tokens: best.response(EOS).to_vec(),
            log_prob: best.log_prob,
            emotion_probs,
            emotion,
            polarity,
            groups,
        })
    }
}

/// Row-wise softmax of `[B, n]` logits, in double precision.
pub fn probabilities<T: Element>(tape: &Tape<T>, logits: Var) -> Vec<Vec<f64>> {
    let t = tape.value(logits);
    let n = *t.shape().last().unwrap_or(&1);
    t.to_f64_vec()
        .chunks(n)
        .map(|row| log_softmax(row).into_iter().map(f64::exp).collect())
        .collect()
}

fn repeat<T: Element>(t: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let mut shape = t.shape().to_vec();
    shape[0] *= n;
    let data: Vec<T> = (0..n).flat_map(|_| t.data().iter().copied()).collect();
    Ok(Tensor::new(&shape, data)?)
}

/// Scores prefixes with the decoder against fixed context keys and fused values.
pub struct ModelScorer<'a, T: Element> {
    pub model: &'a Mime,
    pub store: &'a ParamStore<T>,
    pub hidden: Tensor<T>,
    pub fused: Tensor<T>,
    pub valid: Vec<bool>,
}

impl<T: Element> StepScorer for ModelScorer<'_, T> {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let len = prefixes.first().map_or(0, Vec::len);
        if n == 0 || len == 0 || prefixes.iter().any(|p| p.len() != len) {
            return Err(MimeError::Invalid("prefixes must be non-empty and of equal length".into()));
        }
        let inputs: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let mut tape = Tape::no_grad(self.store);
        let keys = tape.constant(repeat(&self.hidden, n)?);
        let values = tape.constant(repeat(&self.fused, n)?);
        let valid: Vec<bool> = (0..n).flat_map(|_| self.valid.iter().copied()).collect();
        let logits = self.model.decoder.logits(
            &mut tape,
            &self.model.embeddings,
            &inputs,
            n,
            keys,
            values,
            &valid,
            &mut Dropout::disabled(),
        )?;
        let v = self.model.vocab_size;
        let data = tape.value(logits).to_f64_vec();
        Ok((0..n)
            .map(|b| {
                let start = (b * len + len - 1) * v;
                log_softmax(&data[start..start + v])
            })
            .collect())
    }
}

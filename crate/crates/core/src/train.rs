//! Training with early stopping on validation loss, and evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use autodiff::{Adam, AdamConfig, Element, ParamStore, StepOutcome, Tape};
use rand::SeedableRng;
use rayon::prelude::*;

use crate::context::ContextBatch;
use crate::corpus::{make_batches, Batch, EncodedSample};
use crate::error::{MimeError, Result};
use crate::metrics::{corpus_bleu, topk_accuracy};
use crate::model::{probabilities, GenerateOptions, LossValues, Mime, Mode};
use crate::MimeRng;

/// Data-parallel worker count from `MIME_THREADS`; unset or invalid means 1.
pub fn threads_from_env() -> usize {
    std::env::var("MIME_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub losses: LossValues,
    /// Top-1 emotion accuracy on the batch.
    pub top1: f64,
    pub applied: bool,
}

/// Owns the optimizer and the random stream for noise and dropout.
pub struct Trainer<'m, T: Element> {
    pub model: &'m Mime,
    adam: Adam<T>,
    rng: MimeRng,
}

impl<'m, T: Element> Trainer<'m, T> {
    pub fn new(model: &'m Mime, store: &ParamStore<T>) -> Result<Self> {
        let cfg = &model.config;
        let adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                max_grad_norm: cfg.grad_clip.then_some(1.0),
                ..Default::default()
            },
            store,
        )?;
        Ok(Self {
            model,
            adam,
            rng: MimeRng::seed_from_u64(cfg.seed ^ 0x5eed),
        })
    }

    /// One Adam step on the batch. Non-finite losses or gradients skip the
    /// update and are reported through `applied`.
    pub fn step(&mut self, store: &mut ParamStore<T>, batch: &Batch) -> Result<StepResult> {
        let (losses, probs, grads) = {
            let mut tape = Tape::new(store);
            let out = self.model.forward(&mut tape, batch, Mode::Train, &mut self.rng)?;
            let losses = LossValues::read(&tape, &out.losses);
            let probs = probabilities(&tape, out.emotion_logits);
            if !losses.is_finite() {
                log::warn!("non-finite loss {losses:?}; step skipped");
                (losses, probs, None)
            } else {
                let grads = tape.backward(out.losses.total)?;
                (losses, probs, Some(grads))
            }
        };
        let top1 = topk_accuracy(&probs, &batch.emotions, 1)?;
        let applied = match grads {
            Some(g) => {
                store.set_grads(&g);
                self.adam.step(store) == StepOutcome::Applied
            }
            None => false,
        };
        Ok(StepResult { losses, top1, applied })
    }
}

/// Size-weighted mean of loss values and accuracy over batches.
pub fn validation_loss<T: Element>(model: &Mime, store: &ParamStore<T>, batches: &[Batch]) -> Result<(LossValues, f64)> {
    let mut acc = LossValues::default();
    let mut hits = 0.0;
    let mut n = 0usize;
    for b in batches {
        let (l, probs) = model.evaluate_batch(store, b)?;
        let w = b.size() as f64;
        acc.total += w * l.total;
        acc.classification += w * l.classification;
        acc.generation += w * l.generation;
        acc.elbo.resize(l.elbo.len(), 0.0);
        for (a, e) in acc.elbo.iter_mut().zip(&l.elbo) {
            *a += w * e;
        }
        hits += w * topk_accuracy(&probs, &b.emotions, 1)?;
        n += b.size();
    }
    if n == 0 {
        return Err(MimeError::Invalid("validation set is empty".into()));
    }
    let s = 1.0 / n as f64;
    acc.total *= s;
    acc.classification *= s;
    acc.generation *= s;
    acc.elbo.iter_mut().for_each(|e| *e *= s);
    Ok((acc, hits * s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train: LossValues,
    pub train_top1: f64,
    pub valid: LossValues,
    pub valid_top1: f64,
    pub seconds: f64,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub group_names: Vec<&'static str>,
    pub initial_valid: LossValues,
    pub epochs: Vec<EpochStats>,
    /// Total loss of every training step in order.
    pub step_losses: Vec<f64>,
    /// 0 means no epoch improved on the initial parameters.
    pub best_epoch: usize,
    pub best_valid: f64,
    pub stop: StopReason,
}

impl TrainReport {
    pub fn stopped_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }

    /// Comma-separated per-epoch metrics.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch");
        for split in ["train", "valid"] {
            let _ = write!(s, ",{split}_total,{split}_cls");
            for g in &self.group_names {
                let _ = write!(s, ",{split}_elbo_{g}");
            }
            let _ = write!(s, ",{split}_resp,{split}_top1");
        }
        s.push_str(",seconds,skipped_steps\n");
        for e in &self.epochs {
            let _ = write!(s, "{}", e.epoch);
            for (l, top1) in [(&e.train, e.train_top1), (&e.valid, e.valid_top1)] {
                let _ = write!(s, ",{},{}", l.total, l.classification);
                for x in &l.elbo {
                    let _ = write!(s, ",{x}");
                }
                let _ = write!(s, ",{},{}", l.generation, top1);
            }
            let _ = writeln!(s, ",{:.3},{}", e.seconds, e.skipped_steps);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Trains until validation loss fails to improve for `patience` epochs,
/// the epoch cap is hit, or validation loss exceeds ten times its initial
/// value. The best-validation parameters are left in `store`.
pub fn train<T: Element>(
    model: &Mime,
    store: &mut ParamStore<T>,
    train_samples: &[EncodedSample],
    valid_samples: &[EncodedSample],
) -> Result<TrainReport> {
    let cfg = &model.config;
    if train_samples.is_empty() {
        return Err(MimeError::Invalid("training set is empty".into()));
    }
    let valid = make_batches(valid_samples, cfg.batch_size, None)?;
    let (initial_valid, _) = validation_loss(model, store, &valid)?;
    log::info!("initial validation loss {:.4}", initial_valid.total);

    let mut trainer = Trainer::new(model, store)?;
    let mut report = TrainReport {
        group_names: model.mixture.groups.iter().map(|g| g.name).collect(),
        best_valid: initial_valid.total,
        initial_valid,
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        stop: StopReason::MaxEpochs,
    };
    let mut best = store.clone();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let batches = make_batches(train_samples, cfg.batch_size, Some(cfg.seed.wrapping_add(epoch as u64)))?;
        let mut sum = LossValues::default();
        let mut top1 = 0.0;
        let mut seen = 0usize;
        let mut skipped = 0;
        for b in &batches {
            let r = trainer.step(store, b)?;
            report.step_losses.push(r.losses.total);
            if !r.applied {
                skipped += 1;
                continue;
            }
            let w = b.size() as f64;
            sum.total += w * r.losses.total;
            sum.classification += w * r.losses.classification;
            sum.generation += w * r.losses.generation;
            sum.elbo.resize(r.losses.elbo.len(), 0.0);
            for (a, e) in sum.elbo.iter_mut().zip(&r.losses.elbo) {
                *a += w * e;
            }
            top1 += w * r.top1;
            seen += b.size();
        }
        let s = 1.0 / seen.max(1) as f64;
        sum.total *= s;
        sum.classification *= s;
        sum.generation *= s;
        sum.elbo.iter_mut().for_each(|e| *e *= s);

        let (valid_loss, valid_top1) = validation_loss(model, store, &valid)?;
        log::info!(
            "epoch {epoch}: train {:.4} valid {:.4} (resp {:.4}, top1 {:.3})",
            sum.total,
            valid_loss.total,
            valid_loss.generation,
            valid_top1
        );
        let current = valid_loss.total;
        report.epochs.push(EpochStats {
            epoch,
            train: sum,
            train_top1: top1 * s,
            valid: valid_loss,
            valid_top1,
            seconds: start.elapsed().as_secs_f64(),
            skipped_steps: skipped,
        });
        if !current.is_finite() || current > 10.0 * report.initial_valid.total {
            log::warn!("validation loss {current} diverged from initial {}", report.initial_valid.total);
            report.stop = StopReason::Diverged;
            break;
        }
        if current < report.best_valid {
            report.best_valid = current;
            report.best_epoch = epoch;
            best = store.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                report.stop = StopReason::Patience;
                break;
            }
        }
    }
    *store = best;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub generate: bool,
    pub generation: GenerateOptions,
    pub seed: u64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: LossValues,
    /// `(k, accuracy)` for k = 1, 2, 5.
    pub topk: Vec<(usize, f64)>,
    pub bleu: Option<f64>,
    pub hypotheses: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "samples,{}", self.samples);
        let _ = writeln!(s, "loss_total,{}", self.loss.total);
        let _ = writeln!(s, "loss_resp,{}", self.loss.generation);
        for (k, a) in &self.topk {
            let _ = writeln!(s, "top{k},{a}");
        }
        if let Some(b) = self.bleu {
            let _ = writeln!(s, "bleu,{b}");
        }
        s
    }
}

/// Loss, top-k accuracy and optionally BLEU of generated responses. Each
/// sample draws its emotion from a generator seeded by its index, so the
/// result does not depend on the thread count.
pub fn evaluate<T: Element>(
    model: &Mime,
    store: &ParamStore<T>,
    samples: &[EncodedSample],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(MimeError::Invalid("evaluation split is empty".into()));
    }
    let batches = make_batches(samples, model.config.batch_size, None)?;
    let (loss, _) = validation_loss(model, store, &batches)?;
    let mut probs = Vec::with_capacity(samples.len());
    for b in &batches {
        probs.extend(model.emotion_probabilities(store, &b.context)?);
    }
    let gold: Vec<usize> = samples.iter().map(|s| s.emotion).collect();
    let topk = [1, 2, 5]
        .into_iter()
        .map(|k| Ok((k, topk_accuracy(&probs, &gold, k)?)))
        .collect::<Result<Vec<_>>>()?;

    let (bleu, hypotheses) = if opts.generate {
        let one = |(i, s): (usize, &EncodedSample)| -> Result<Vec<usize>> {
            let ctx = ContextBatch::from_rows(&[(&s.context, &s.speakers)])?;
            let mut rng = MimeRng::seed_from_u64(opts.seed.wrapping_add(i as u64));
            Ok(model.generate(store, &ctx, &opts.generation, &mut rng)?.tokens)
        };
        let hyps: Vec<Vec<usize>> = if opts.threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(opts.threads)
                .build()
                .map_err(|e| MimeError::Invalid(e.to_string()))?;
            pool.install(|| samples.par_iter().enumerate().map(one).collect::<Result<_>>())?
        } else {
            samples.iter().enumerate().map(one).collect::<Result<_>>()?
        };
        let refs: Vec<Vec<usize>> = samples.iter().map(|s| s.response.clone()).collect();
        (Some(corpus_bleu(&refs, &hyps)?.score), hyps)
    } else {
        (None, Vec::new())
    };
    Ok(EvalReport {
        samples: samples.len(),
        loss,
        topk,
        bleu,
        hypotheses,
    })
}

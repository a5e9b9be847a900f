//! `mime`: train, evaluate, probe and chat with the response generator.

mod dialogue;

use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use autodiff::ParamStore;
use clap::{Args, Parser, Subcommand};
use mime::checkpoint::{self, LoadedModel};
use mime::context::ContextBatch;
use mime::corpus::{detokenize, encode_samples, load_pretrained, load_split, Batch, Split, Vocabulary};
use mime::metrics::{centroid_separation, project_top2, projection_csv, topk_accuracy};
use mime::train::{evaluate, threads_from_env, train, EvalOptions, Trainer};
use mime::{emotion_name, write_atomic, EmotionGrouping, GenerateOptions, Generation, Mime, MimeError, MimeRng};
use mime::{ModelConfig, EMOTIONS, NUM_EMOTIONS};
use rand::SeedableRng;
use thiserror::Error;

use dialogue::Dialogue;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Mime(#[from] MimeError),
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "mime", version, about = "Empathetic response generation with emotion mimicry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Generate a reply for one context.
    Generate(GenerateArgs),
    /// Loss, top-k emotion accuracy and BLEU on a split.
    Eval(EvalArgs),
    /// Write the 2-D principal projection of the emotion embeddings.
    InspectEmotions(InspectArgs),
    /// Read user lines from stdin and answer each one.
    Chat(ChatArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train.csv and valid.csv.
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample both groups but feed them to the branches in fixed order.
    #[arg(long)]
    no_mimicry: bool,
    /// One 32-way emotion distribution instead of the polarity groups.
    #[arg(long)]
    no_grouping: bool,
    /// Fit the first 8 training samples for `--steps` updates.
    #[arg(long)]
    overfit_batch: bool,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Metrics CSV; defaults to the checkpoint path with `.metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Alternative positive/negative grouping file.
    #[arg(long)]
    grouping: Option<PathBuf>,
    /// Whitespace-separated pretrained word vectors.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Extra config overrides, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Beam width; defaults to the checkpoint's config.
    #[arg(long)]
    beam: Option<usize>,
    /// Use the prior mean instead of sampling the emotion latent.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_len: Option<usize>,
}

impl DecodeArgs {
    fn options(&self, cfg: &ModelConfig) -> Result<GenerateOptions> {
        let mut o = GenerateOptions::from_config(cfg);
        if let Some(b) = self.beam {
            if b == 0 {
                return Err(CliError::Usage("--beam must be at least 1".into()));
            }
            o.beam = b;
        }
        if let Some(m) = self.max_len {
            o.max_len = m;
        }
        o.deterministic |= self.deterministic;
        Ok(o)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Utterances separated by `||`; the last one is the user's.
    #[arg(long)]
    context: String,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated subset of `bleu,topk`.
    #[arg(long, default_value = "bleu,topk")]
    metrics: String,
    /// Metrics CSV; defaults to the checkpoint path with `.<split>.eval.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ChatArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::InspectEmotions(a) => cmd_inspect(&a),
        Command::Chat(a) => cmd_chat(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_config(a: &TrainArgs) -> Result<ModelConfig> {
    let mut cfg = match &a.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {o:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.mimicry &= !a.no_mimicry;
    cfg.grouping &= !a.no_grouping;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let grouping = match &a.grouping {
        Some(p) => EmotionGrouping::load(p)?,
        None => EmotionGrouping::standard(),
    };
    let train_split = load_split(&a.data, Split::Train)?;
    let valid_split = load_split(&a.data, Split::Valid)?;
    let vocab = Vocabulary::build(&train_split.samples, cfg.min_freq);
    let encode = |s| encode_samples(s, &vocab, cfg.max_context_len, cfg.max_response_len);
    let train_set = encode(&train_split.samples);
    let valid_set = encode(&valid_split.samples);
    log::info!(
        "{} training samples from {} conversations, {} validation samples, vocabulary {}",
        train_set.len(),
        train_split.conversations.len(),
        valid_set.len(),
        vocab.len()
    );

    let (model, mut store) = Mime::init::<f32>(cfg.clone(), grouping, vocab.len())?;
    if let Some(p) = &a.embeddings {
        let cov = load_pretrained(p, &vocab, &mut store, model.embeddings.word.table)?;
        log::info!("pretrained vectors for {}/{} tokens", cov.matched, cov.vocab_size);
    }
    let metrics_path = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.csv"));

    let metrics = if a.overfit_batch {
        overfit(&model, &mut store, &train_set, a.steps)?
    } else {
        let report = train(&model, &mut store, &train_set, &valid_set)?;
        log::info!(
            "stopped after epoch {} ({:?}); best epoch {} with validation loss {:.4}",
            report.stopped_epoch(),
            report.stop,
            report.best_epoch,
            report.best_valid
        );
        report.to_csv()
    };
    checkpoint::save(&a.out, &model, &store, &vocab)?;
    write_atomic(&metrics_path, metrics.as_bytes())?;
    println!("checkpoint: {}", a.out.display());
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

fn overfit(
    model: &Mime,
    store: &mut ParamStore<f32>,
    samples: &[mime::corpus::EncodedSample],
    steps: usize,
) -> Result<String> {
    let n = samples.len().min(8);
    if n == 0 {
        return Err(CliError::Usage("no training samples to overfit".into()));
    }
    let batch = Batch::new(&samples[..n].iter().collect::<Vec<_>>())?;
    let mut trainer = Trainer::new(model, store)?;
    let mut csv = String::from("step,total,cls,resp,top1\n");
    for step in 1..=steps {
        let r = trainer.step(store, &batch)?;
        csv += &format!(
            "{step},{},{},{},{}\n",
            r.losses.total, r.losses.classification, r.losses.generation, r.top1
        );
    }
    let (loss, probs) = model.evaluate_batch(store, &batch)?;
    let top1 = topk_accuracy(&probs, &batch.emotions, 1)?;
    println!("overfit: L_resp {:.4}, top-1 {:.1}%", loss.generation, 100.0 * top1);
    Ok(csv)
}

fn load_checkpoint(path: &Path) -> Result<LoadedModel<f32>> {
    Ok(checkpoint::load::<f32>(path)?)
}

fn print_generation(g: &Generation, vocab: &Vocabulary) {
    println!("response: {}", detokenize(&vocab.decode(&g.tokens)));
    println!("emotion: {} (p={:.3})", emotion_name(g.emotion), g.emotion_probs[g.emotion]);
    println!("polarity: {}", g.polarity);
    for group in &g.groups {
        let mut d = group.distribution.clone();
        d.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let top: Vec<String> = d.iter().take(3).map(|(e, p)| format!("{} {p:.3}", EMOTIONS[*e])).collect();
        println!("{}: {}", group.name, top.join(", "));
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let LoadedModel { model, store, vocab } = load_checkpoint(&a.ckpt)?;
    let opts = a.decode.options(&model.config)?;
    let ctx = Dialogue::parse(&a.context)?.context(&vocab, model.config.max_context_len)?;
    let mut rng = MimeRng::seed_from_u64(a.decode.seed);
    let g = model.generate(&store, &ctx, &opts, &mut rng)?;
    print_generation(&g, &vocab);
    Ok(())
}

/// The vocabulary a checkpoint would have been built with from `data`.
fn check_vocabulary(data: &Path, cfg: &ModelConfig, vocab: &Vocabulary) -> Result<()> {
    if !data.join(Split::Train.file_name()).exists() {
        log::warn!("no training split in {}; vocabulary compatibility not checked", data.display());
        return Ok(());
    }
    let rebuilt = Vocabulary::build(&load_split(data, Split::Train)?.samples, cfg.min_freq);
    if rebuilt.len() != vocab.len() {
        return Err(MimeError::VocabMismatch(format!(
            "checkpoint has {} tokens, training data in {} gives {}",
            vocab.len(),
            data.display(),
            rebuilt.len()
        ))
        .into());
    }
    if let Some(i) = (0..vocab.len()).find(|&i| vocab.token(i) != rebuilt.token(i)) {
        return Err(MimeError::VocabMismatch(format!(
            "token {i} is {:?} in the checkpoint but {:?} in {}",
            vocab.token(i),
            rebuilt.token(i),
            data.display()
        ))
        .into());
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut bleu = false;
    let mut topk = false;
    for m in a.metrics.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        match m {
            "bleu" => bleu = true,
            "topk" => topk = true,
            other => return Err(CliError::Usage(format!("unknown metric {other:?}; expected bleu or topk"))),
        }
    }
    let split = Split::parse(&a.split)?;
    let LoadedModel { model, store, vocab } = load_checkpoint(&a.ckpt)?;
    let cfg = &model.config;
    check_vocabulary(&a.data, cfg, &vocab)?;
    let loaded = load_split(&a.data, split)?;
    if loaded.samples.is_empty() {
        return Err(CliError::Usage(format!("split {} has no samples", a.split)));
    }
    let samples = encode_samples(&loaded.samples, &vocab, cfg.max_context_len, cfg.max_response_len);
    let opts = EvalOptions {
        generate: bleu,
        generation: a.decode.options(cfg)?,
        seed: a.decode.seed,
        threads: threads_from_env(),
    };
    let report = evaluate(&model, &store, &samples, &opts)?;

    println!("samples      {}", report.samples);
    println!("loss         {:.4}", report.loss.total);
    println!("resp loss    {:.4}", report.loss.generation);
    if topk {
        for (k, acc) in &report.topk {
            println!("top-{k}        {:.2}%", 100.0 * acc);
        }
    }
    if let Some(b) = report.bleu {
        println!("bleu         {b:.2}");
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| with_suffix(&a.ckpt, &format!(".{}.eval.csv", a.split)));
    write_atomic(&out, report.to_csv().as_bytes())?;
    println!("metrics: {}", out.display());
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let LoadedModel { model, store, .. } = load_checkpoint(&a.ckpt)?;
    let table = store.value(model.mixture.emotions.table);
    let rows: Vec<Vec<f64>> = (0..NUM_EMOTIONS)
        .map(|i| table.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect();
    let p = project_top2(&rows)?;
    write_atomic(&a.out, projection_csv(&p, &model.grouping).as_bytes())?;
    println!(
        "captured variance {:.4} of {:.4} ({:.1}%)",
        p.captured_variance(),
        p.total_variance,
        100.0 * p.captured_variance() / p.total_variance
    );
    println!("positive/negative centroid separation {:.4}", centroid_separation(&p, &model.grouping));
    println!("projection: {}", a.out.display());
    Ok(())
}

fn cmd_chat(a: &ChatArgs) -> Result<()> {
    let LoadedModel { model, store, vocab } = load_checkpoint(&a.ckpt)?;
    let opts = a.decode.options(&model.config)?;
    let mut rng = MimeRng::seed_from_u64(a.decode.seed);
    let mut dialogue = Dialogue::default();
    let interactive = std::io::stdin().is_terminal();
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    loop {
        if interactive {
            eprint!("> ");
            let _ = std::io::stderr().flush();
        }
        let Some(line) = lines.next() else { break };
        let line = line.map_err(|e| MimeError::io("<stdin>", e))?;
        let tokens = mime::corpus::tokenize(&line);
        if tokens.is_empty() {
            continue;
        }
        dialogue.push(tokens);
        let ctx: ContextBatch = dialogue.context(&vocab, model.config.max_context_len)?;
        let g = model.generate(&store, &ctx, &opts, &mut rng)?;
        let reply = vocab.decode(&g.tokens);
        println!("{}", detokenize(&reply));
        log::debug!("emotion {} ({}), {} turns so far", emotion_name(g.emotion), g.polarity, dialogue.len() + 1);
        dialogue.push(reply);
    }
    Ok(())
}

//! Training loop, evaluation metrics, PCA and checkpoint persistence.

use std::path::Path;

use mime::checkpoint;
use mime::corpus::{encode_samples, load_split, EncodedSample, Split, Vocabulary};
use mime::emotion::EMOTIONS;
use mime::metrics::{corpus_bleu, project_top2, projection_csv, topk_accuracy};
use mime::model::total_loss;
use mime::train::{evaluate, train, EvalOptions, StopReason};
use mime::{EmotionGrouping, GenerateOptions, Mime, MimeError, MimeRng, ModelConfig, NUM_EMOTIONS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

fn small_config() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        max_context_len: 32,
        max_response_len: 12,
        max_decode_len: 12,
        ..Default::default()
    }
}

fn corpus(cfg: &ModelConfig) -> (Vocabulary, Vec<EncodedSample>, Vec<EncodedSample>) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/small");
    let train = load_split(&dir, Split::Train).unwrap();
    let valid = load_split(&dir, Split::Valid).unwrap();
    let vocab = Vocabulary::build(&train.samples, cfg.min_freq);
    let enc = |s| encode_samples(s, &vocab, cfg.max_context_len, cfg.max_response_len);
    let (t, v) = (enc(&train.samples), enc(&valid.samples));
    (vocab, t, v)
}

#[test]
fn loss_weighting_arithmetic() {
    assert_eq!(total_loss(0.0, &[0.0, 0.0], 0.0, 1.0, 1.0, 1.0), 0.0);
    assert_eq!(total_loss(1.0, &[2.0, 3.0], 4.0, 1.0, 1.0, 1.0), 10.0);
    let d = ModelConfig::default();
    assert_eq!((d.alpha, d.beta, d.gamma, d.lr, d.patience, d.batch_size, d.beam), (1.0, 1.0, 1.0, 1e-4, 2, 16, 5));
}

#[test]
fn stops_after_two_stale_epochs_and_keeps_best() {
    // An update far below f32 resolution leaves validation loss unchanged.
    let cfg = ModelConfig {
        lr: 1e-30,
        max_epochs: 10,
        ..small_config()
    };
    let (vocab, t, v) = corpus(&cfg);
    let (model, mut store) = Mime::init::<f32>(cfg, EmotionGrouping::standard(), vocab.len()).unwrap();
    let before = store.clone();
    let report = train(&model, &mut store, &t[..32], &v[..16]).unwrap();
    assert_eq!(report.stop, StopReason::Patience);
    assert_eq!(report.epochs.len(), 2);
    assert_eq!(report.best_epoch, 0);
    for id in store.ids() {
        assert_eq!(store.value(id).data(), before.value(id).data());
    }
}

#[test]
fn overfit_batch_loss_falls_every_epoch_and_best_is_restored() {
    let cfg = ModelConfig {
        lr: 1e-3,
        max_epochs: 5,
        ..small_config()
    };
    let (vocab, t, _) = corpus(&cfg);
    let batch = &t[..8];
    let (model, mut store) = Mime::init::<f32>(cfg, EmotionGrouping::standard(), vocab.len()).unwrap();
    let report = train(&model, &mut store, batch, batch).unwrap();
    assert_eq!(report.epochs.len(), 5);
    let train_losses: Vec<f64> = report.epochs.iter().map(|e| e.train.total).collect();
    assert!(train_losses.windows(2).all(|w| w[1] < w[0]), "{train_losses:?}");

    let batches = mime::corpus::make_batches(batch, 16, None).unwrap();
    let (after, _) = mime::train::validation_loss(&model, &store, &batches).unwrap();
    assert!((after.total - report.best_valid).abs() < 1e-9);

    let csv = report.to_csv();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("epoch,train_total,train_cls,train_elbo_positive,train_elbo_negative,train_resp"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn seeded_training_is_bitwise_repeatable() {
    let cfg = ModelConfig {
        max_epochs: 1,
        ..small_config()
    };
    let (vocab, t, v) = corpus(&cfg);
    let run = || {
        let (model, mut store) = Mime::init::<f32>(cfg.clone(), EmotionGrouping::standard(), vocab.len()).unwrap();
        let r = train(&model, &mut store, &t[..64], &v[..16]).unwrap();
        r.step_losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn evaluation_is_independent_of_thread_count() {
    let cfg = small_config();
    let (vocab, _, v) = corpus(&cfg);
    let (model, store) = Mime::init::<f32>(cfg.clone(), EmotionGrouping::standard(), vocab.len()).unwrap();
    let opts = |threads| EvalOptions {
        generate: true,
        generation: GenerateOptions {
            beam: 2,
            max_len: 6,
            ..GenerateOptions::from_config(&cfg)
        },
        seed: 5,
        threads,
    };
    let a = evaluate(&model, &store, &v[..12], &opts(1)).unwrap();
    let b = evaluate(&model, &store, &v[..12], &opts(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.topk.iter().map(|x| x.0).collect::<Vec<_>>(), [1, 2, 5]);
    assert!(a.bleu.is_some());
    assert!(matches!(evaluate(&model, &store, &[], &opts(1)), Err(MimeError::Invalid(_))));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let cfg = small_config();
    let (vocab, _, v) = corpus(&cfg);
    let (model, store) = Mime::init::<f32>(cfg, EmotionGrouping::standard(), vocab.len()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &model, &store, &vocab).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"MIMECKPT");
    let loaded = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(loaded.vocab, vocab);
    assert_eq!(loaded.model.config, model.config);
    for id in store.ids() {
        let name = store.name(id);
        let other = loaded.store.id(name).unwrap();
        let a: Vec<u32> = store.value(id).data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = loaded.store.value(other).data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b, "{name}");
    }
    let batches = mime::corpus::make_batches(&v[..16], 16, None).unwrap();
    let x = mime::train::validation_loss(&model, &store, &batches).unwrap().0;
    let y = mime::train::validation_loss(&loaded.model, &loaded.store, &batches).unwrap().0;
    assert_eq!(x, y);

    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(checkpoint::load::<f32>(&cut), Err(MimeError::Checkpoint(_))));
    assert!(matches!(
        checkpoint::load::<f32>(&dir.path().join("missing.ckpt")),
        Err(MimeError::Io { .. })
    ));
}

// ------------------------------------------------------------ metrics

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn bleu_edge_cases() {
    let refs = vec![words("a b c d"), words("e f g")];
    assert_eq!(corpus_bleu(&refs, &refs).unwrap().score, 100.0);
    let none = vec![words("x y z w"), words("q r s")];
    assert_eq!(corpus_bleu(&refs, &none).unwrap().score, 0.0);
    assert!(corpus_bleu(&refs, &refs[..1]).is_err());
}

#[test]
fn top_k_edge_cases() {
    let mut rng = MimeRng::seed_from_u64(0);
    let gold: Vec<usize> = (0..64).map(|i| i % NUM_EMOTIONS).collect();
    let perfect: Vec<Vec<f64>> = gold
        .iter()
        .map(|&g| (0..NUM_EMOTIONS).map(|i| if i == g { 1.0 } else { 0.0 }).collect())
        .collect();
    assert_eq!(topk_accuracy(&perfect, &gold, 1).unwrap(), 1.0);
    let random: Vec<Vec<f64>> = gold
        .iter()
        .map(|_| (0..NUM_EMOTIONS).map(|_| rng.random::<f64>()).collect())
        .collect();
    assert_eq!(topk_accuracy(&random, &gold, 32).unwrap(), 1.0);
}

fn variance_along(rows: &[Vec<f64>], dirs: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    dirs.iter()
        .map(|u| {
            rows.iter()
                .map(|r| (0..d).map(|j| (r[j] - mean[j]) * u[j]).sum::<f64>().powi(2))
                .sum::<f64>()
                / n
        })
        .sum()
}

#[test]
fn planar_data_is_recovered_exactly() {
    let mut rng = MimeRng::seed_from_u64(1);
    let rows: Vec<Vec<f64>> = (0..NUM_EMOTIONS)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            vec![a, 0.0, b, 0.0, 0.0]
        })
        .collect();
    let p = project_top2(&rows).unwrap();
    assert_eq!(p.coords.len(), 32);
    assert!((p.captured_variance() - p.total_variance).abs() < 1e-10);
    // Pairwise distances survive a projection onto the data's own plane.
    for i in 0..5 {
        for j in 0..5 {
            let orig = ((rows[i][0] - rows[j][0]).powi(2) + (rows[i][2] - rows[j][2]).powi(2)).sqrt();
            let proj = ((p.coords[i][0] - p.coords[j][0]).powi(2) + (p.coords[i][1] - p.coords[j][1]).powi(2)).sqrt();
            assert!((orig - proj).abs() < 1e-9);
        }
    }
    let csv = projection_csv(&p, &EmotionGrouping::standard());
    assert_eq!(csv.lines().count(), 33);
    assert!(csv.lines().nth(1).unwrap().starts_with(EMOTIONS[0]));
}

#[test]
fn principal_plane_beats_random_planes() {
    let mut rng = MimeRng::seed_from_u64(2);
    let d = 10;
    let rows: Vec<Vec<f64>> = (0..NUM_EMOTIONS)
        .map(|_| (0..d).map(|j| rng.sample::<f64, _>(StandardNormal) * (1.0 + j as f64)).collect())
        .collect();
    let captured = project_top2(&rows).unwrap().captured_variance();
    for _ in 0..100 {
        let mut u: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= nu);
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(x, a)| *x -= dot * a);
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        assert!(captured + 1e-12 >= variance_along(&rows, &[u, v]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bleu_ignores_corpus_order(
        pairs in prop::collection::vec(
            (prop::collection::vec(0u8..6, 1..8), prop::collection::vec(0u8..6, 1..8)),
            1..8,
        ),
        rotate in 0usize..8,
    ) {
        let refs: Vec<Vec<u8>> = pairs.iter().map(|p| p.0.clone()).collect();
        let hyps: Vec<Vec<u8>> = pairs.iter().map(|p| p.1.clone()).collect();
        let k = rotate % refs.len();
        let mut r2 = refs.clone();
        let mut h2 = hyps.clone();
        r2.rotate_left(k);
        h2.rotate_left(k);
        let a = corpus_bleu(&refs, &hyps).unwrap().score;
        let b = corpus_bleu(&r2, &h2).unwrap().score;
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&a));
    }
}

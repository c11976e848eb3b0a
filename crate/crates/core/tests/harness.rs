use std::collections::BTreeSet;

use dasep_core::dsp::stft;
use dasep_core::embednet::Network;
use dasep_core::harness::config::RunConfig;
use dasep_core::harness::data::{draw_example, split_speakers, synth_data, synthetic_corpus};
use dasep_core::harness::experiments::inference_config;
use dasep_core::harness::pipeline::{separate, InferenceMode};
use dasep_core::harness::run::{load_checkpoint, RunDir};
use dasep_core::harness::train::Trainer;
use dasep_core::mixgen::measured_snr_db;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.speaker_seconds = 3.0;
    cfg.n_train = 12;
    cfg.n_test = 6;
    cfg.segment_frames = 24;
    cfg.hidden_channels = 4;
    cfg.dilations = vec![1, 2];
    cfg.embedding_dim = 5;
    cfg.batch_size = 2;
    cfg
}

#[test]
fn synth_data_keeps_test_speakers_out_of_training() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let s = synth_data(&cfg, dir.path()).unwrap();
    let train: BTreeSet<_> = s.train_speakers.iter().cloned().collect();
    let test: BTreeSet<_> = s.test_speakers.iter().cloned().collect();
    assert!(train.is_disjoint(&test));
    assert_eq!(test.len(), cfg.test_speakers.len());
    for (_, (a, b)) in &s.train {
        assert!(train.contains(a) && train.contains(b) && a != b);
    }
    for (_, (a, b)) in &s.test {
        assert!(test.contains(a) && test.contains(b) && a != b);
    }
    assert_eq!(s.train.len(), cfg.n_train);
    assert_eq!(s.test.len(), cfg.n_test);
}

#[test]
fn synth_data_is_reproducible_from_the_seed() {
    let cfg = small_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth_data(&cfg, a.path()).unwrap();
    synth_data(&cfg, b.path()).unwrap();
    for rel in ["train.tsv", "test.tsv", "speakers.tsv", "train/000003_mix.wav", "test/000001_s2.wav"] {
        let x = std::fs::read(a.path().join(rel)).unwrap();
        let y = std::fs::read(b.path().join(rel)).unwrap();
        assert!(x == y, "{rel} differs");
    }
    // Refuses to overwrite an existing data set.
    assert!(synth_data(&cfg, a.path()).is_err());
}

#[test]
fn mixing_snr_is_uniform_and_realized() {
    let mut cfg = small_config();
    cfg.speaker_seconds = 1.0;
    let corpus = synthetic_corpus(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 10_000;
    let bins = 10;
    let mut counts = vec![0usize; bins];
    for _ in 0..draws {
        let d = draw_example(&corpus, 2, &cfg, &mut rng).unwrap();
        let snr = d.example.snr_db;
        assert!((cfg.snr_min_db..cfg.snr_max_db).contains(&snr));
        let src = &d.example.sources;
        assert!((measured_snr_db(&src[0], &src[1]) - snr).abs() < 1e-6);
        let b = ((snr - cfg.snr_min_db) / (cfg.snr_max_db - cfg.snr_min_db) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let expected = draws as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-squared with 9 degrees of freedom.
    assert!(chi2 < 27.88, "chi2 {chi2} counts {counts:?}");
}

#[test]
fn learning_rate_schedule_boundaries() {
    let s = RunConfig::default().schedule().unwrap();
    assert_eq!(s.lr(0), 1e-3);
    assert_eq!(s.lr(9_999), 1e-3);
    assert_eq!(s.lr(10_000), 5e-4);
    assert!((s.lr(100_000) - 1e-5).abs() < 1e-18);
}

#[test]
fn run_directory_refuses_to_overwrite() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let run = RunDir::create(&root, &cfg).unwrap();
    assert_eq!(run.config().unwrap(), cfg);
    assert!(RunDir::create(&root, &cfg).is_err());
}

#[test]
fn resume_reproduces_the_next_step_exactly() {
    let cfg = small_config();
    let (train, _) = split_speakers(synthetic_corpus(&cfg).unwrap(), &cfg.test_speakers).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path().join("run"), &cfg).unwrap();

    let mut a = Trainer::new(&cfg, train.clone()).unwrap();
    for _ in 0..3 {
        a.train_step().unwrap();
    }
    let path = run.save_checkpoint(&a.checkpoint()).unwrap();
    let ra = a.train_step().unwrap();

    let mut b = Trainer::resume(&cfg, train, &load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(b.step(), 3);
    let rb = b.train_step().unwrap();
    assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
    assert_eq!(ra.lr, rb.lr);
    assert_eq!(a.checkpoint(), b.checkpoint());
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    let cfg = RunConfig::load(path).unwrap();
    let (train, _) = split_speakers(synthetic_corpus(&cfg).unwrap(), &cfg.test_speakers).unwrap();
    let mut t = Trainer::new(&cfg, train).unwrap();
    let batch = t.batch_for_step(0).unwrap();
    let mut prev = f64::INFINITY;
    for i in 0..50 {
        let r = t.update(&batch).unwrap();
        assert!(r.loss < prev, "update {i}: loss {} after {prev}", r.loss);
        prev = r.loss;
    }
    assert!(t.loss_on(&batch).unwrap() < prev);
}

#[test]
fn streaming_separation_matches_batch() {
    let cfg = small_config();
    let corpus = synthetic_corpus(&cfg).unwrap();
    let net = common::streaming::perturbed_network(&cfg.network(), 3);
    let inf = inference_config(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let d = draw_example(&corpus, 60, &cfg, &mut rng).unwrap();
        let mix = &d.example.mixture;
        let a = separate(&net, mix, &inf, InferenceMode::Batch).unwrap();
        let b = separate(&net, mix, &inf, InferenceMode::Streaming).unwrap();
        for (x, y) in a.estimates.iter().zip(&b.estimates) {
            assert!(common::bss::max_diff(x.samples(), y.samples()) < 1e-8);
        }
    }
}

#[test]
fn hard_masks_partition_the_mixture() {
    let cfg = small_config();
    let corpus = synthetic_corpus(&cfg).unwrap();
    let net = Network::build(&cfg.network(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = draw_example(&corpus, 80, &cfg, &mut rng).unwrap();
    let mix = &d.example.mixture;
    let sep = separate(&net, mix, &inference_config(&cfg), InferenceMode::Batch).unwrap();
    let mag = stft(mix).unwrap().magnitude();
    let sum: Vec<f64> = (0..mag.values.len())
        .map(|i| sep.magnitudes.iter().map(|m| m.values[i]).sum())
        .collect();
    assert!(common::bss::max_diff(&sum, &mag.values) < 1e-12);
    // iSTFT is linear, so the estimates add back to the mixture away from the edges.
    let n = mix.len();
    let total: Vec<f64> = (0..n).map(|i| sep.estimates.iter().map(|e| e.samples()[i]).sum()).collect();
    assert!(common::bss::max_diff(&total[256..n - 256], &mix.samples()[256..n - 256]) < 1e-8);
}

#[test]
fn end_to_end_gradient_check_across_seeds() {
    for seed in 1..=4 {
        let r = dasep_core::harness::gradcheck::end_to_end_loss_check(
            seed,
            &dasep_core::harness::gradcheck::end_to_end_options(seed, 30),
        )
        .unwrap();
        assert_eq!(r.checked, 30);
        assert!(r.passes(1e-4), "seed {seed}: {r:?}");
    }
}

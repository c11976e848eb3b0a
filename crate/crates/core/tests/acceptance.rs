//! Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if
//! any fails. Criteria 7, 9, 10 and 11 share one model trained here with
//! `configs/desk.cfg`.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use dasep_autodiff::{grad_check, GradCheckOptions, Tape, Tensor, Var};
use dasep_core::audio_io::Waveform;
use dasep_core::bsseval::{bss_eval_sources, bss_eval_sources_with, project_onto_delays};
use dasep_core::dsp::{istft, stft, StftConfig};
use dasep_core::embednet::{receptive_field, Network, NetworkConfig};
use dasep_core::harness::config::RunConfig;
use dasep_core::harness::data::{shifted_corpus, split_speakers, synthetic_corpus};
use dasep_core::harness::experiments::{
    draw_mixtures, evaluate, length_experiment, length_summary, noise_experiment, noise_summary, shift_experiment,
    shift_summary,
};
use dasep_core::harness::gradcheck::{end_to_end_loss_check, end_to_end_options};
use dasep_core::harness::pipeline::InferenceMode;
use dasep_core::harness::train::{train_loop, Trainer};
use dasep_core::mixgen::Speaker;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::bss::{dense_projection, max_diff, noise, orthogonal_noise_estimates, wave};

const TRAIN_STEP_BUDGET: u64 = 20_000;
const TRAIN_TIME_BUDGET: Duration = Duration::from_secs(3600);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn failed(e: impl std::fmt::Display) -> Outcome {
    outcome(false, format!("error: {e}"))
}

fn desk_config() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn parameter_count() -> Outcome {
    let net = match Network::build(&NetworkConfig::default(), 0) {
        Ok(n) => n,
        Err(e) => return failed(e),
    };
    let names: Vec<&str> = net.params().iter().map(|p| p.name.as_str()).collect();
    let convs = names.iter().filter(|n| n.ends_with(".weight")).count();
    let biases = names.iter().filter(|n| n.ends_with(".bias")).count();
    let bn = names.iter().filter(|n| n.ends_with(".bn.gamma")).count();
    let bn_shift = names.iter().filter(|n| n.ends_with(".bn.beta")).count();
    let total = net.num_parameters();
    outcome(
        total == 1_650_836 && convs == 13 && biases == 13 && bn == 12 && bn_shift == 12,
        format!("{total} parameters; {convs} conv layers with {biases} biases, {bn} batch-norm pairs"),
    )
}

fn receptive_fields() -> Outcome {
    let d = receptive_field(&NetworkConfig::default());
    let toy = receptive_field(&NetworkConfig::fixed_lag_toy());
    outcome(
        d.lag == 127 && d.rf_time == 255 && toy.lag == 4,
        format!("default lag {} rf {}; toy lag {}", d.lag, d.rf_time, toy.lag),
    )
}

fn stft_geometry() -> Outcome {
    let cfg = StftConfig::for_rate(8000);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.gen_range(1024..8000);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Waveform::new(x.clone(), 8000).unwrap();
        let y = match stft(&w).and_then(|s| istft(&s)) {
            Ok(y) => y,
            Err(e) => return failed(e),
        };
        // Interior: samples covered by full-weight frames on both sides.
        let (lo, hi) = (cfg.frame_len, y.len().min(len) - cfg.frame_len);
        let err: f64 = (lo..hi).map(|i| (x[i] - y.samples()[i]).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = (lo..hi).map(|i| x[i] * x[i]).sum::<f64>().sqrt();
        worst = worst.max(err / norm);
    }
    let bins = cfg.n_bins();
    outcome(
        bins == 129 && worst < 1e-6,
        format!("F = {bins}; worst interior round-trip error {worst:.2e} over 100 waveforms"),
    )
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contracts with a fixed random tensor so the upstream gradient is generic.
fn project(tape: &mut Tape, v: Var, seed: u64) -> dasep_autodiff::Result<Var> {
    let r = random(tape.shape(v), seed);
    let w = tape.mul_const(v, &r)?;
    Ok(tape.sum(w))
}

type Check = Box<dyn Fn(&mut Tape, &[Var]) -> dasep_autodiff::Result<Var>>;

fn gradient_fidelity() -> Outcome {
    let opts = GradCheckOptions {
        max_coords: 50,
        seed: 4,
        ..GradCheckOptions::default()
    };
    let x4 = random(&[2, 3, 9, 11], 1);
    let y4 = random(&[2, 3, 9, 11], 2);
    // (name, inputs, function, tolerance); linear primitives get 1e-6.
    let cases: Vec<(&str, Vec<Tensor>, Check, f64)> = vec![
        ("conv2d", vec![x4.clone(), random(&[4, 3, 3, 3], 3), random(&[4], 4)], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], (2, 4))?;
            project(t, y, 10)
        }), 1e-6),
        ("batch_norm_train", vec![x4.clone(), random(&[3], 5), random(&[3], 6)], Box::new(|t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 11)
        }), 1e-4),
        ("batch_norm_eval", vec![x4.clone(), random(&[3], 7), random(&[3], 8)], Box::new(|t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
            project(t, y, 12)
        }), 1e-6),
        ("relu", vec![x4.clone()], Box::new(|t, v| {
            let y = t.relu(v[0]);
            project(t, y, 13)
        }), 1e-6),
        ("residual_add", vec![x4.clone(), y4.clone()], Box::new(|t, v| {
            let y = t.residual_add(v[0], v[1])?;
            project(t, y, 14)
        }), 1e-6),
        ("add", vec![x4.clone(), y4.clone()], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 15)
        }), 1e-6),
        ("scale", vec![x4.clone()], Box::new(|t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y, 16)
        }), 1e-6),
        ("reshape", vec![x4.clone()], Box::new(|t, v| {
            let y = t.reshape(v[0], &[6, 99])?;
            project(t, y, 17)
        }), 1e-6),
        ("mul", vec![x4.clone(), y4.clone()], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 18)
        }), 1e-4),
        ("softmax", vec![x4.clone()], Box::new(|t, v| {
            let y = t.softmax(v[0], 1)?;
            project(t, y, 19)
        }), 1e-4),
        ("l2_normalize", vec![x4.clone()], Box::new(|t, v| {
            let y = t.l2_normalize(v[0], 1, 1e-12)?;
            project(t, y, 20)
        }), 1e-4),
        ("mse_loss", vec![x4.clone(), y4.clone()], Box::new(|t, v| t.mse_loss(v[0], v[1])), 1e-4),
        ("bmm", vec![random(&[2, 3, 4], 21), random(&[2, 4, 5], 22)], Box::new(|t, v| {
            let y = t.bmm(v[0], v[1])?;
            project(t, y, 23)
        }), 1e-4),
        ("transpose", vec![random(&[2, 3, 4], 24)], Box::new(|t, v| {
            let y = t.transpose(v[0])?;
            project(t, y, 25)
        }), 1e-6),
    ];
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for (name, inputs, f, tol) in &cases {
        match grad_check(inputs, f, &opts) {
            Ok(r) => {
                if r.max_rel_error > worst.0 {
                    worst = (r.max_rel_error, name);
                }
                if !r.passes(*tol) {
                    failures.push(format!("{name} {:.2e}", r.max_rel_error));
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let e2e = match end_to_end_loss_check(7, &end_to_end_options(4, 50)) {
        Ok(r) => r,
        Err(e) => return failed(e),
    };
    if !e2e.passes(1e-4) || e2e.checked != 50 {
        failures.push(format!("end-to-end loss {:.2e}", e2e.max_rel_error));
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "{} primitives and the end-to-end loss, 50 coordinates each; worst primitive {} {:.2e}, end-to-end {:.2e} ({} non-smooth coordinates replaced)",
                cases.len(),
                worst.1,
                worst.0,
                e2e.max_rel_error,
                e2e.non_smooth
            )
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

fn streaming_equivalence(desk: &RunConfig) -> Outcome {
    let cfg = desk.network();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let net = common::streaming::perturbed_network(&cfg, 100 + i);
        let frames = rng.gen_range(150..400);
        let x = common::streaming::features(cfg.input_bins, frames, &mut rng);
        let batch = match net.forward(&x) {
            Ok(b) => b,
            Err(e) => return failed(e),
        };
        for _ in 0..20 {
            let mut cuts: Vec<usize> = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(1..frames)).collect();
            cuts.sort_unstable();
            cuts.dedup();
            let s = common::streaming::stream(&net, &x, &cuts);
            worst = worst.max(common::streaming::max_diff(&batch.values, &s.values));
        }
    }
    outcome(
        worst <= 1e-10,
        format!("max |stream - batch| = {worst:.2e} over 10 inputs x 20 chunkings"),
    )
}

fn oracle_sanity(cfg: &RunConfig, corpus: &[Speaker]) -> Outcome {
    let mixes = match draw_mixtures(corpus, cfg.eval_window, 100, cfg, 50) {
        Ok(m) => m,
        Err(e) => return failed(e),
    };
    let mut sum = 0.0;
    let mut below = 0;
    for (mix, srcs) in &mixes {
        let ex = std::iter::once(Ok(("x".to_string(), mix.clone(), srcs.clone())));
        match evaluate(None, ex, cfg, InferenceMode::Batch, None) {
            Ok(s) => {
                sum += s.oracle_sdr_db;
                if s.oracle_sdr_db <= s.mixture_sdr_db {
                    below += 1;
                }
            }
            Err(e) => return failed(e),
        }
    }
    let mean = sum / mixes.len() as f64;
    outcome(
        mean >= 10.0 && below == 0,
        format!("oracle IBM mean SDR {mean:.2} dB over 100 mixtures; {below} not above the mixture baseline"),
    )
}

fn bss_eval_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let refs = vec![wave(noise(4000, &mut rng)), wave(noise(4000, &mut rng))];
    let perfect = match bss_eval_sources(&refs, &refs) {
        Ok(s) => s.sdr_db.iter().copied().fold(f64::INFINITY, f64::min),
        Err(e) => return failed(e),
    };
    let mut designed = 0.0f64;
    for target in [0.0, 10.0, 20.0] {
        let ests = orthogonal_noise_estimates(&refs, 512, target, &mut rng);
        match bss_eval_sources_with(&ests, &refs, 512) {
            Ok(s) => {
                for v in s.sdr_db {
                    designed = designed.max((v - target).abs());
                }
            }
            Err(e) => return failed(e),
        }
    }
    let mut dense = 0.0f64;
    for _ in 0..5 {
        let r = vec![noise(64, &mut rng), noise(64, &mut rng)];
        let est = noise(64, &mut rng);
        let rw: Vec<Waveform> = r.iter().cloned().map(wave).collect();
        for j in 0..2 {
            let dec = match project_onto_delays(&wave(est.clone()), &rw, j, 4) {
                Ok(d) => d,
                Err(e) => return failed(e),
            };
            let own = dense_projection(&r[j..j + 1], &est, 4);
            let all = dense_projection(&r, &est, 4);
            let interf: Vec<f64> = all.iter().zip(&own).map(|(a, b)| a - b).collect();
            dense = dense.max(max_diff(&dec.s_target, &own)).max(max_diff(&dec.e_interf, &interf));
        }
    }
    outcome(
        perfect >= 100.0 && designed <= 0.5 && dense < 1e-8,
        format!(
            "perfect {perfect:.1} dB; designed-SDR deviation {designed:.3} dB; dense oracle deviation {dense:.1e}"
        ),
    )
}

fn invariant_suites() -> Outcome {
    let mut failures = Vec::new();
    let all = common::props::all();
    for (name, check) in &all {
        if let Err(e) = check(1000) {
            failures.push(format!("{name}: {e}"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} suites x 1000 cases", all.len())
        } else {
            failures.join("; ")
        },
    )
}

struct Trained {
    net: Network,
    steps: u64,
    elapsed: Duration,
}

fn train(cfg: &RunConfig, train: Vec<Speaker>) -> dasep_core::Result<Trained> {
    let started = Instant::now();
    let mut trainer = Trainer::new(cfg, train)?;
    train_loop(&mut trainer, cfg, None)?;
    Ok(Trained {
        steps: trainer.step(),
        net: trainer.into_network(),
        elapsed: started.elapsed(),
    })
}

fn learning_works(cfg: &RunConfig, model: &Trained, test: &[Speaker]) -> Outcome {
    let mixes = match draw_mixtures(test, cfg.eval_window, cfg.n_test, cfg, 40) {
        Ok(m) => m,
        Err(e) => return failed(e),
    };
    let examples = mixes
        .into_iter()
        .enumerate()
        .map(|(i, (m, s))| Ok((i.to_string(), m, s)));
    let s = match evaluate(Some(&model.net), examples, cfg, InferenceMode::Batch, None) {
        Ok(s) => s,
        Err(e) => return failed(e),
    };
    let within = model.steps <= TRAIN_STEP_BUDGET && model.elapsed <= TRAIN_TIME_BUDGET;
    outcome(
        within && s.model_sdr_db >= s.mixture_sdr_db + 5.0,
        format!(
            "model {:.2} dB vs baseline {:.2} dB (+{:.2}) on {} unheard-speaker mixtures; oracle {:.2} dB; {} steps in {:.0} s",
            s.model_sdr_db,
            s.mixture_sdr_db,
            s.model_sdr_db - s.mixture_sdr_db,
            s.examples,
            s.oracle_sdr_db,
            model.steps,
            model.elapsed.as_secs_f64()
        ),
    )
}

fn length_generalization(cfg: &RunConfig, net: &Network, test: &[Speaker]) -> Outcome {
    match length_experiment(net, test, cfg) {
        Ok(rows) => {
            let (first, last) = length_summary(&rows);
            let windows = rows.iter().filter(|r| r.mixture == 0).count();
            outcome(
                (first - last).abs() < 1.0,
                format!(
                    "T = {}: first window {first:.2} dB, last window {last:.2} dB ({windows} windows x {} mixtures)",
                    cfg.length_frames, cfg.length_mixtures
                ),
            )
        }
        Err(e) => failed(e),
    }
}

fn noise_recovery(cfg: &RunConfig, net: &Network, test: &[Speaker]) -> Outcome {
    match noise_experiment(net, test, cfg) {
        Ok(rows) => {
            let s = noise_summary(&rows, cfg);
            outcome(
                (s.final_db - s.pre_burst_db).abs() < 1.0,
                format!(
                    "pre-burst {:.2} dB, burst window {:.2} dB (clean {:.2}), final {:.2} dB over {} mixtures",
                    s.pre_burst_db, s.burst_window_db, s.clean_burst_window_db, s.final_db, cfg.noise_mixtures
                ),
            )
        }
        Err(e) => failed(e),
    }
}

fn shift_ordering(cfg: &RunConfig, net: &Network, test: &[Speaker]) -> Outcome {
    let shifted = match shifted_corpus(cfg) {
        Ok(s) => s,
        Err(e) => return failed(e),
    };
    match shift_experiment(net, test, &shifted, cfg) {
        Ok(rows) => {
            let [(a, _), (b, ob), (c, oc)] = shift_summary(&rows);
            outcome(
                a >= b && b >= c && ob - oc <= 2.0,
                format!(
                    "model in-dist {a:.2} >= shifted {b:.2} >= reverb {c:.2} dB over {} mixtures each; oracle loss from reverb {:.2} dB",
                    cfg.shift_mixtures,
                    ob - oc
                ),
            )
        }
        Err(e) => failed(e),
    }
}

fn report(id: usize, name: &str, o: &Outcome, results: &mut Vec<bool>) {
    println!("{} {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    results.push(o.pass);
}

fn main() {
    // Training progress goes to stderr; criterion lines go to stdout.
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let desk = desk_config();
    let mut results = Vec::new();
    report(1, "parameter count", &parameter_count(), &mut results);
    report(2, "receptive field", &receptive_fields(), &mut results);
    report(3, "STFT geometry", &stft_geometry(), &mut results);
    report(4, "gradient fidelity", &gradient_fidelity(), &mut results);
    report(5, "streaming equivalence", &streaming_equivalence(&desk), &mut results);

    let corpus = synthetic_corpus(&desk).expect("synthetic corpus");
    report(6, "oracle sanity", &oracle_sanity(&desk, &corpus), &mut results);
    let (train_spk, test_spk) = split_speakers(corpus, &desk.test_speakers).expect("speaker split");
    let trained = train(&desk, train_spk);
    match &trained {
        Ok(m) => report(7, "learning works", &learning_works(&desk, m, &test_spk), &mut results),
        Err(e) => report(7, "learning works", &failed(e), &mut results),
    }
    report(8, "bss_eval correctness", &bss_eval_correctness(), &mut results);
    let model_dependent: [(usize, &str, fn(&RunConfig, &Network, &[Speaker]) -> Outcome); 3] = [
        (9, "length generalization", length_generalization),
        (10, "noise recovery", noise_recovery),
        (11, "shift degradation ordering", shift_ordering),
    ];
    for (id, name, f) in model_dependent {
        let o = match &trained {
            Ok(m) => f(&desk, &m.net, &test_spk),
            Err(e) => failed(format!("no trained model: {e}")),
        };
        report(id, name, &o, &mut results);
    }
    report(12, "invariant suites", &invariant_suites(), &mut results);

    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}

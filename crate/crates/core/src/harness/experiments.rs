//! Evaluation and the three generalization experiments (length, noise
//! burst, acoustic shift). Each returns its rows in memory and optionally
//! appends them to a run directory.

use std::io::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::data::draw_example;
use super::pipeline::{
    score_example, separate, windowed_scores, InferenceConfig, InferenceMode, WindowScore,
};
use super::run::RunDir;
use crate::audio_io::Waveform;
use crate::bsseval::{write_scores_csv, SeparationScore, SCORES_CSV_HEADER};
use crate::dsp::{log_magnitude, stft, LOG_FLOOR};
use crate::embednet::Network;
use crate::error::{Error, Result};
use crate::mixgen::{apply_room, inject_noise_burst, make_mixture, Speaker};

pub const METRICS_HEADER: &str = "experiment,condition,mixture,start_frame,sdr_src0_db,sdr_src1_db,mean_sdr_db";

/// One windowed or whole-signal SDR measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub experiment: String,
    pub condition: String,
    pub mixture: usize,
    pub start_frame: usize,
    pub sdr_db: Vec<f64>,
}

impl MetricsRow {
    pub fn mean_sdr(&self) -> f64 {
        self.sdr_db.iter().sum::<f64>() / self.sdr_db.len() as f64
    }

    fn csv(&self) -> String {
        let per = (0..2)
            .map(|i| self.sdr_db.get(i).map_or(String::new(), |v| format!("{v:.4}")))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "{},{},{},{},{per},{:.4}",
            self.experiment,
            self.condition,
            self.mixture,
            self.start_frame,
            self.mean_sdr()
        )
    }
}

pub fn write_rows(run: &RunDir, name: &str, rows: &[MetricsRow]) -> Result<()> {
    let mut w = run.new_metrics(name, METRICS_HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of `mean_sdr` over rows matching `pred`.
pub fn mean_where(rows: &[MetricsRow], pred: impl Fn(&MetricsRow) -> bool) -> f64 {
    let (sum, n) = rows
        .iter()
        .filter(|r| pred(r))
        .fold((0.0, 0usize), |(s, n), r| (s + r.mean_sdr(), n + 1));
    sum / n as f64
}

pub fn inference_config(cfg: &RunConfig) -> InferenceConfig {
    InferenceConfig {
        alpha: cfg.alpha,
        n_sources: 2,
        kmeans: cfg.kmeans(cfg.seed),
    }
}

fn rng_for(cfg: &RunConfig, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    rng
}

fn window_rows(experiment: &str, condition: &str, mixture: usize, scores: &[WindowScore]) -> Vec<MetricsRow> {
    scores
        .iter()
        .map(|w| MetricsRow {
            experiment: experiment.into(),
            condition: condition.into(),
            mixture,
            start_frame: w.start_frame,
            sdr_db: w.score.sdr_db.clone(),
        })
        .collect()
}

/// Running means of the three score rows of an evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalSummary {
    pub examples: usize,
    pub model_sdr_db: f64,
    pub oracle_sdr_db: f64,
    pub mixture_sdr_db: f64,
}

/// Scores `examples` (mixture, sources) with the model, the oracle IBM and
/// the mixture-as-estimate baseline. Scores are streamed to CSV when `run`
/// is given, so memory does not grow with the number of examples.
pub fn evaluate<I>(net: Option<&Network>, examples: I, cfg: &RunConfig, mode: InferenceMode, run: Option<&RunDir>) -> Result<EvalSummary>
where
    I: IntoIterator<Item = Result<(String, Waveform, Vec<Waveform>)>>,
{
    let inf = inference_config(cfg);
    let mut files = match run {
        Some(r) => Some([
            r.new_metrics("model_scores.csv", SCORES_CSV_HEADER)?,
            r.new_metrics("oracle_scores.csv", SCORES_CSV_HEADER)?,
            r.new_metrics("mixture_scores.csv", SCORES_CSV_HEADER)?,
        ]),
        None => None,
    };
    let mut sums = [0.0f64; 3];
    let mut n = 0usize;
    for ex in examples {
        let (id, mixture, sources) = ex?;
        if sources.is_empty() {
            return Err(Error::Data(format!("example {id} has no ground-truth sources")));
        }
        let s = score_example(net, &mixture, &sources, &inf, mode)?;
        let rows: [Option<&SeparationScore>; 3] = [s.model.as_ref(), Some(&s.oracle), Some(&s.mixture)];
        for (k, row) in rows.iter().enumerate() {
            if let Some(score) = row {
                sums[k] += score.mean_sdr();
                if let Some(f) = files.as_mut() {
                    write_scores_csv(&mut f[k], &id, score)?;
                }
            }
        }
        n += 1;
        log::debug!("{id}: oracle {:.2} dB", s.oracle.mean_sdr());
    }
    if n == 0 {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let summary = EvalSummary {
        examples: n,
        model_sdr_db: if net.is_some() { sums[0] / n as f64 } else { f64::NAN },
        oracle_sdr_db: sums[1] / n as f64,
        mixture_sdr_db: sums[2] / n as f64,
    };
    if let Some(r) = run {
        let mut w = r.new_metrics("summary.csv", "row,examples,mean_sdr_db")?;
        writeln!(w, "model,{n},{:.4}", summary.model_sdr_db)?;
        writeln!(w, "oracle,{n},{:.4}", summary.oracle_sdr_db)?;
        writeln!(w, "mixture,{n},{:.4}", summary.mixture_sdr_db)?;
        w.flush()?;
    }
    Ok(summary)
}

/// `count` fresh mixtures of `frames` frames from `speakers`, drawn on RNG
/// stream `stream`.
pub fn draw_mixtures(
    speakers: &[Speaker],
    frames: usize,
    count: usize,
    cfg: &RunConfig,
    stream: u64,
) -> Result<Vec<(Waveform, Vec<Waveform>)>> {
    let mut rng = rng_for(cfg, stream);
    (0..count)
        .map(|_| {
            let d = draw_example(speakers, frames, cfg, &mut rng)?;
            Ok((d.example.mixture, d.example.sources))
        })
        .collect()
}

/// Long-input experiment: `length_mixtures` mixtures of `length_frames`
/// frames, scored in consecutive `eval_window`-frame windows.
pub fn length_experiment(net: &Network, test_speakers: &[Speaker], cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    let inf = inference_config(cfg);
    let mixes = draw_mixtures(test_speakers, cfg.length_frames, cfg.length_mixtures, cfg, 30)?;
    let mut rows = Vec::new();
    for (i, (mix, srcs)) in mixes.iter().enumerate() {
        let scores = windowed_scores(net, mix, srcs, cfg.eval_window, &inf)?;
        log::info!(
            "length mixture {i}: first {:.2} dB, last {:.2} dB",
            scores[0].score.mean_sdr(),
            scores[scores.len() - 1].score.mean_sdr()
        );
        rows.extend(window_rows("length", "model", i, &scores));
    }
    Ok(rows)
}

/// First- and last-window mean SDR over all mixtures of a length run.
pub fn length_summary(rows: &[MetricsRow]) -> (f64, f64) {
    let last = rows.iter().map(|r| r.start_frame).max().unwrap_or(0);
    (
        mean_where(rows, |r| r.start_frame == 0),
        mean_where(rows, |r| r.start_frame == last),
    )
}

/// Noise-burst experiment: `noise_mixtures` mixtures of `noise_frames`
/// frames, scored per window before (`clean`) and after (`burst`) adding
/// white noise for `noise_seconds` at the temporal midpoint. References are
/// the clean sources in both conditions.
pub fn noise_experiment(net: &Network, test_speakers: &[Speaker], cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    let inf = inference_config(cfg);
    let mixes = draw_mixtures(test_speakers, cfg.noise_frames, cfg.noise_mixtures, cfg, 31)?;
    let mut rows = Vec::new();
    for (i, (mix, srcs)) in mixes.iter().enumerate() {
        let center = mix.duration_secs() / 2.0;
        let noisy = inject_noise_burst(mix, center, cfg.noise_seconds, cfg.noise_level_db, cfg.seed + i as u64)?;
        for (condition, m) in [("clean", mix), ("burst", &noisy)] {
            let scores = windowed_scores(net, m, srcs, cfg.eval_window, &inf)?;
            rows.extend(window_rows("noise", condition, i, &scores));
        }
    }
    Ok(rows)
}

/// Mean SDR of the burst condition in the first, burst-containing and last
/// windows, plus the clean-run first window.
#[derive(Clone, Copy, Debug)]
pub struct NoiseSummary {
    pub pre_burst_db: f64,
    pub clean_pre_burst_db: f64,
    pub burst_window_db: f64,
    pub clean_burst_window_db: f64,
    pub final_db: f64,
}

pub fn noise_summary(rows: &[MetricsRow], cfg: &RunConfig) -> NoiseSummary {
    let last = rows.iter().map(|r| r.start_frame).max().unwrap_or(0);
    let mid = cfg.noise_frames / 2;
    let burst_start = rows
        .iter()
        .map(|r| r.start_frame)
        .filter(|&s| s <= mid && mid < s + cfg.eval_window)
        .max()
        .unwrap_or(0);
    NoiseSummary {
        pre_burst_db: mean_where(rows, |r| r.condition == "burst" && r.start_frame == 0),
        clean_pre_burst_db: mean_where(rows, |r| r.condition == "clean" && r.start_frame == 0),
        burst_window_db: mean_where(rows, |r| r.condition == "burst" && r.start_frame == burst_start),
        clean_burst_window_db: mean_where(rows, |r| r.condition == "clean" && r.start_frame == burst_start),
        final_db: mean_where(rows, |r| r.condition == "burst" && r.start_frame == last),
    }
}

/// Acoustic-shift experiment over `shift_mixtures` segment-length mixtures
/// per condition: `in_dist` (unheard default-corpus speakers), `shifted`
/// (speakers from outside the training f0/AM ranges) and `reverb` (the
/// shifted mixtures with every source passed through a synthetic room, as
/// if the shifted corpus were replayed and re-recorded; scored against the
/// reverberated sources). Oracle-IBM rows are emitted for every condition.
pub fn shift_experiment(
    net: &Network,
    test_speakers: &[Speaker],
    shifted_speakers: &[Speaker],
    cfg: &RunConfig,
) -> Result<Vec<MetricsRow>> {
    let inf = inference_config(cfg);
    let n = cfg.shift_mixtures;
    let frames = cfg.segment_frames.max(cfg.eval_window);
    let in_dist = draw_mixtures(test_speakers, frames, n, cfg, 32)?;
    let shifted = draw_mixtures(shifted_speakers, frames, n, cfg, 33)?;
    let mut reverb = Vec::with_capacity(n);
    for (i, (_, srcs)) in shifted.iter().enumerate() {
        let wet = srcs
            .iter()
            .enumerate()
            .map(|(k, s)| apply_room(s, cfg.seed * 1000 + (2 * i + k) as u64, cfg.rt60))
            .collect::<Result<Vec<_>>>()?;
        // The sources already carry the drawn SNR; mix at their measured ratio.
        let ex = make_mixture(&wet[0], &wet[1], crate::mixgen::measured_snr_db(&wet[0], &wet[1]))?;
        reverb.push((ex.mixture, ex.sources));
    }
    let mut rows = Vec::new();
    for (condition, set) in [("in_dist", &in_dist), ("shifted", &shifted), ("reverb", &reverb)] {
        for (i, (mix, srcs)) in set.iter().enumerate() {
            let s = score_example(Some(net), mix, srcs, &inf, InferenceMode::Batch)?;
            for (row, score) in [("model", s.model.as_ref()), ("oracle", Some(&s.oracle))] {
                let score = score.expect("model score requested");
                rows.push(MetricsRow {
                    experiment: "shift".into(),
                    condition: format!("{condition}_{row}"),
                    mixture: i,
                    start_frame: 0,
                    sdr_db: score.sdr_db.clone(),
                });
            }
        }
        log::info!(
            "shift {condition}: model {:.2} dB, oracle {:.2} dB",
            mean_where(&rows, |r| r.condition == format!("{condition}_model")),
            mean_where(&rows, |r| r.condition == format!("{condition}_oracle"))
        );
    }
    Ok(rows)
}

/// Aggregate SDR per shift condition, `(model, oracle)`.
pub fn shift_summary(rows: &[MetricsRow]) -> [(f64, f64); 3] {
    ["in_dist", "shifted", "reverb"].map(|c| {
        (
            mean_where(rows, |r| r.condition == format!("{c}_model")),
            mean_where(rows, |r| r.condition == format!("{c}_oracle")),
        )
    })
}

/// Separates a single mixture, writing estimates and spectrogram dumps into
/// `run`.
pub fn separate_to_run(net: &Network, mixture: &Waveform, cfg: &RunConfig, mode: InferenceMode, run: &RunDir, name: &str) -> Result<Vec<std::path::PathBuf>> {
    let inf = inference_config(cfg);
    let sep = separate(net, mixture, &inf, mode)?;
    let spec = stft(mixture)?;
    let feats = log_magnitude(&spec, LOG_FLOOR)?;
    crate::dsp::write_grid_csv(
        run.path("spectrograms").join(format!("{name}_mixture_logmag.csv")),
        &feats.values,
        feats.n_bins,
        feats.n_frames,
    )?;
    let mut paths = Vec::new();
    for (c, (est, mag)) in sep.estimates.iter().zip(&sep.magnitudes).enumerate() {
        let p = run.path("estimates").join(format!("{name}_source{c}.wav"));
        crate::audio_io::write_wav(&p, est)?;
        crate::dsp::write_grid_csv(
            run.path("spectrograms").join(format!("{name}_source{c}_mag.csv")),
            &mag.values,
            mag.n_bins,
            mag.n_frames,
        )?;
        paths.push(p);
    }
    Ok(paths)
}

/// Expected window starts for a `frames`-long input.
pub fn window_starts(frames: usize, window: usize) -> Vec<usize> {
    (0..).map(|i| i * window).take_while(|s| s + window <= frames).collect()
}

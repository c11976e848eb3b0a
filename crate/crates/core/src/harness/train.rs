//! The training loop.

use std::io::Write as _;

use dasep_autodiff::{Adam, Checkpoint, PiecewiseConstant, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::data::draw_example;
use super::pipeline::{separate, InferenceConfig, InferenceMode};
use super::run::RunDir;
use crate::attractor::{attractor_loss, ideal_binary_mask, masked_labels, threshold, LossTarget};
use crate::audio_io::Waveform;
use crate::bsseval::bss_eval_sources;
use crate::dsp::{log_magnitude, stft, LOG_FLOOR};
use crate::embednet::{Mode, Network};
use crate::error::{Error, Result};
use crate::mixgen::Speaker;

/// Inputs and supervision for one optimizer step.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 1, F, T]` log-magnitude features.
    pub features: Tensor,
    pub targets: Vec<LossTarget>,
    /// Examples redrawn because a source had no bins above threshold.
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub skipped: usize,
}

pub struct Trainer {
    cfg: RunConfig,
    net: Network,
    speakers: Vec<Speaker>,
    adam: Adam,
    schedule: PiecewiseConstant,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, speakers: Vec<Speaker>) -> Result<Trainer> {
        cfg.validate()?;
        let net = Network::build(&cfg.network(), cfg.seed)?;
        Self::with_network(cfg, speakers, net, 0)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: &RunConfig, speakers: Vec<Speaker>, ckpt: &Checkpoint) -> Result<Trainer> {
        cfg.validate()?;
        let net = Network::from_checkpoint(&cfg.network(), ckpt)?;
        Self::with_network(cfg, speakers, net, ckpt.step)
    }

    fn with_network(cfg: &RunConfig, speakers: Vec<Speaker>, net: Network, step: u64) -> Result<Trainer> {
        if speakers.len() < 2 {
            return Err(Error::Corpus("training needs at least 2 speakers".into()));
        }
        Ok(Trainer {
            cfg: cfg.clone(),
            net,
            speakers,
            adam: Adam::default(),
            schedule: cfg.schedule()?,
            step,
        })
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.net.to_checkpoint(self.step)
    }

    /// The batch used by update `step` (0-based); a pure function of the
    /// seed and the step.
    pub fn batch_for_step(&self, step: u64) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(1000 + step);
        build_batch(&self.speakers, &self.cfg, self.cfg.batch_size, &mut rng)
    }

    /// Loss of `batch` under the current parameters with batch statistics,
    /// without updating anything.
    pub fn loss_on(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.net.params().bind(&mut tape);
        let x = tape.constant(batch.features.clone());
        let (v, _) = self.net.forward_tape(&mut tape, &bound, x, Mode::Train)?;
        let (loss, _) = attractor_loss(&mut tape, v, &batch.targets)?;
        Ok(tape.value(loss).data()[0])
    }

    /// One Adam update on the batch for the current step.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let batch = self.batch_for_step(self.step)?;
        self.update(&batch)
    }

    /// One Adam update on a given batch.
    pub fn update(&mut self, batch: &Batch) -> Result<StepReport> {
        let step = self.step;
        let lr = self.schedule.lr(step);
        let mut tape = Tape::new();
        let bound = self.net.params().bind(&mut tape);
        let x = tape.constant(batch.features.clone());
        let (v, stats) = self.net.forward_tape(&mut tape, &bound, x, Mode::Train)?;
        let (loss, _) = attractor_loss(&mut tape, v, &batch.targets)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss is {value} at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let params = self.net.params_mut();
        params.zero_grad();
        params.accumulate(&grads, &bound);
        drop(grads);
        drop(tape);
        if self.net.params().iter().any(|p| p.grad.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite()))) {
            return Err(Error::Numerical(format!("non-finite gradient at step {step}")));
        }
        self.adam.step(self.net.params_mut(), lr, step + 1)?;
        self.net.update_running_stats(&stats)?;
        self.step += 1;
        Ok(StepReport {
            step,
            lr,
            loss: value,
            skipped: batch.skipped,
        })
    }
}

/// Draws `size` usable examples; examples where a source has no bin above
/// the threshold are redrawn.
pub fn build_batch(speakers: &[Speaker], cfg: &RunConfig, size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let frames = cfg.segment_frames;
    let mut feats = Vec::new();
    let mut targets = Vec::with_capacity(size);
    let mut skipped = 0;
    while targets.len() < size {
        if skipped > 100 * size {
            return Err(Error::Data("too many degenerate training examples".into()));
        }
        let d = draw_example(speakers, frames, cfg, rng)?;
        match training_target(&d.example.mixture, &d.example.sources, cfg.alpha)? {
            Some((x, target)) => {
                feats.extend_from_slice(&x);
                targets.push(target);
            }
            None => skipped += 1,
        }
    }
    let n_bins = targets[0].labels.n_bins;
    Ok(Batch {
        features: Tensor::new(&[size, 1, n_bins, frames], feats)?,
        targets,
        skipped,
    })
}

/// Features and supervision for one mixture, or `None` if a source has no
/// bin above the threshold.
pub fn training_target(mixture: &Waveform, sources: &[Waveform], alpha: f64) -> Result<Option<(Vec<f64>, LossTarget)>> {
    let spec = stft(mixture)?;
    let feats = log_magnitude(&spec, LOG_FLOOR)?;
    let mags = sources
        .iter()
        .map(|s| Ok(stft(s)?.magnitude()))
        .collect::<Result<Vec<_>>>()?;
    let h = threshold(&feats, alpha)?;
    let labels = masked_labels(&ideal_binary_mask(&mags)?, &h)?;
    if labels.counts().contains(&0) {
        return Ok(None);
    }
    let target = LossTarget {
        labels,
        mixture: spec.magnitude().values,
        sources: mags.into_iter().map(|m| m.values).collect(),
    };
    Ok(Some((feats.values, target)))
}

/// Fixed validation mixtures drawn from the training speakers.
pub fn validation_set(speakers: &[Speaker], cfg: &RunConfig) -> Result<Vec<(Waveform, Vec<Waveform>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    (0..cfg.validation_examples)
        .map(|_| {
            let d = draw_example(speakers, cfg.segment_frames, cfg, &mut rng)?;
            Ok((d.example.mixture, d.example.sources))
        })
        .collect()
}

/// Mean model SDR over `examples`.
pub fn mean_sdr(net: &Network, examples: &[(Waveform, Vec<Waveform>)], cfg: &RunConfig) -> Result<f64> {
    let inf = InferenceConfig {
        alpha: cfg.alpha,
        n_sources: 2,
        kmeans: cfg.kmeans(cfg.seed),
    };
    let mut total = 0.0;
    for (mix, srcs) in examples {
        let sep = separate(net, mix, &inf, InferenceMode::Batch)?;
        total += bss_eval_sources(&sep.estimates, srcs)?.mean_sdr();
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Runs `trainer` to `cfg.steps`, logging losses and validation SDR and
/// checkpointing into `run` when given. A non-finite loss aborts after
/// dumping the offending batch.
pub fn train_loop(trainer: &mut Trainer, cfg: &RunConfig, run: Option<&RunDir>) -> Result<()> {
    let validation = if cfg.validation_examples > 0 {
        validation_set(&trainer.speakers, cfg)?
    } else {
        Vec::new()
    };
    let mut loss_csv = run.map(|r| r.metrics("train_loss.csv", "step,lr,loss,skipped")).transpose()?;
    let mut val_csv = run.map(|r| r.metrics("validation.csv", "step,mean_sdr_db")).transpose()?;
    let started = std::time::Instant::now();
    let mut recent = 0.0;
    let mut recent_n = 0;
    while trainer.step() < cfg.steps {
        let report = match trainer.train_step() {
            Ok(r) => r,
            Err(e @ Error::Numerical(_)) => {
                if let Some(r) = run {
                    dump_batch(r, trainer, trainer.step())?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        recent += report.loss;
        recent_n += 1;
        if let Some(w) = loss_csv.as_mut() {
            writeln!(w, "{},{:e},{:.6e},{}", report.step, report.lr, report.loss, report.skipped)?;
        }
        let done = trainer.step();
        if done % 50 == 0 || done == cfg.steps {
            log::info!(
                "step {done}/{}: loss {:.4e} lr {:e} ({:.1}s)",
                cfg.steps,
                recent / recent_n as f64,
                report.lr,
                started.elapsed().as_secs_f64()
            );
            recent = 0.0;
            recent_n = 0;
        }
        if let Some(r) = run {
            if done % cfg.checkpoint_every == 0 || done == cfg.steps {
                let path = r.save_checkpoint(&trainer.checkpoint())?;
                log::info!("saved {}", path.display());
                if let Some(w) = loss_csv.as_mut() {
                    w.flush()?;
                }
            }
        }
        if !validation.is_empty() && (done % cfg.validate_every == 0 || done == cfg.steps) {
            let sdr = mean_sdr(trainer.network(), &validation, cfg)?;
            log::info!("step {done}: validation SDR {sdr:.2} dB");
            if let Some(w) = val_csv.as_mut() {
                writeln!(w, "{done},{sdr:.4}")?;
                w.flush()?;
            }
        }
    }
    Ok(())
}

fn dump_batch(run: &RunDir, trainer: &Trainer, step: u64) -> Result<()> {
    let batch = trainer.batch_for_step(step)?;
    let dir = run.path(format!("dump_step_{step:08}"));
    std::fs::create_dir_all(&dir)?;
    let shape = batch.features.shape().to_vec();
    let (f, t) = (shape[2], shape[3]);
    for b in 0..shape[0] {
        let plane = &batch.features.data()[b * f * t..(b + 1) * f * t];
        crate::dsp::write_grid_csv(dir.join(format!("features_{b}.csv")), plane, f, t)?;
    }
    run.save_checkpoint(&trainer.checkpoint())?;
    log::error!("dumped offending batch to {}", dir.display());
    Ok(())
}

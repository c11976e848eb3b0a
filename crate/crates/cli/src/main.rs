//! `dasep`: data synthesis, training, separation, evaluation and the
//! generalization experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dasep_core::audio_io::read_wav;
use dasep_core::embednet::{receptive_field, Network};
use dasep_core::harness::config::RunConfig;
use dasep_core::harness::data::{
    load_corpus, load_entry, load_training_speakers, read_manifest, shifted_corpus, split_speakers, synth_data,
};
use dasep_core::harness::experiments::{
    evaluate, length_experiment, length_summary, noise_experiment, noise_summary, separate_to_run, shift_experiment,
    shift_summary, write_rows,
};
use dasep_core::harness::gradcheck::{end_to_end_loss_check, end_to_end_options};
use dasep_core::harness::pipeline::InferenceMode;
use dasep_core::harness::run::{load_checkpoint, network_config_for, RunDir, CONFIG_SNAPSHOT};
use dasep_core::harness::train::{train_loop, Trainer};
use dasep_core::mixgen::Speaker;
use dasep_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dasep", version, about = "Deep attractor speech separation with a dilated CNN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Checkpoint file (`<run>/checkpoints/step_N.ckpt`) or a run directory
    /// (its latest checkpoint is used).
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the speaker corpus and train/test mixture manifests.
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model into a new run directory, or resume an existing one.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Data directory written by `synth-data`; without it the synthetic
        /// corpus is generated in memory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
        /// Continue from the latest checkpoint in `--run`.
        #[arg(long)]
        resume: bool,
    },
    /// Separate one mixture WAV into per-source WAVs.
    Separate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "batch")]
        mode: InferenceMode,
    },
    /// Score a test manifest with the model, the oracle IBM and the mixture.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "batch")]
        mode: InferenceMode,
        /// Score only the first N entries.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Windowed SDR over inputs much longer than the training segments.
    ExpLength(ExperimentArgs),
    /// Windowed SDR around a mid-sequence white-noise burst.
    ExpNoise(ExperimentArgs),
    /// SDR under in-distribution, shifted-speaker and reverberant conditions.
    ExpShift(ExperimentArgs),
    /// Finite-difference check of the end-to-end training loss.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        coords: usize,
    },
    /// Print architecture, parameter count and receptive field.
    Info {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Data directory written by `synth-data` (test speakers are read from
    /// it); the synthetic corpus is regenerated otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Numerical(_)) => 3,
        Some(Error::Config(_)) => 1,
        _ => 2,
    }
}

fn load_config(args: &ConfigArgs, fallback: Option<&Path>) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&args.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.is_file() => RunConfig::load(p)?,
        _ => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Resolves a checkpoint argument (file or run directory).
fn checkpoint_file(p: &Path) -> anyhow::Result<PathBuf> {
    if p.is_dir() {
        let run = RunDir::open(p)?;
        return run
            .latest_checkpoint()?
            .ok_or_else(|| Error::Data(format!("no checkpoints in {}", p.display())).into());
    }
    Ok(p.to_path_buf())
}

/// The snapshot of the run a checkpoint belongs to, if any.
fn snapshot_for(ckpt: &Path) -> Option<PathBuf> {
    let run = ckpt.parent()?.parent()?;
    Some(run.join(CONFIG_SNAPSHOT))
}

fn load_model(model: &ModelArgs, config: &ConfigArgs) -> anyhow::Result<(Network, RunConfig)> {
    let ckpt_path = checkpoint_file(&model.checkpoint)?;
    let cfg = load_config(config, snapshot_for(&ckpt_path).as_deref())?;
    let net_cfg = network_config_for(&ckpt_path)?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let net = Network::from_checkpoint(&net_cfg, &ckpt)?;
    log::info!("loaded {} (step {})", ckpt_path.display(), ckpt.step);
    Ok((net, cfg))
}

fn speakers(cfg: &RunConfig, data: Option<&Path>) -> anyhow::Result<(Vec<Speaker>, Vec<Speaker>)> {
    Ok(match data {
        Some(d) => load_training_speakers(d, cfg.sample_rate)?,
        None => split_speakers(load_corpus(cfg)?, &cfg.test_speakers)?,
    })
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::SynthData { config, out } => {
            let cfg = load_config(&config, None)?;
            let s = synth_data(&cfg, &out)?;
            println!("train speakers  {}", s.train_speakers.join(","));
            println!("test speakers   {}", s.test_speakers.join(","));
            println!("train mixtures  {}", s.train.len());
            println!("test mixtures   {}", s.test.len());
        }
        Command::Train {
            config,
            data,
            run,
            resume,
        } => {
            if resume {
                let dir = RunDir::open(&run)?;
                let mut cfg = dir.config()?;
                cfg.apply_overrides(&config.overrides)?;
                let (train, _) = speakers(&cfg, data.as_deref())?;
                let mut trainer = match dir.latest_checkpoint()? {
                    Some(p) => {
                        log::info!("resuming from {}", p.display());
                        Trainer::resume(&cfg, train, &load_checkpoint(&p)?)?
                    }
                    None => Trainer::new(&cfg, train)?,
                };
                train_loop(&mut trainer, &cfg, Some(&dir))?;
            } else {
                let cfg = load_config(&config, None)?;
                let (train, _) = speakers(&cfg, data.as_deref())?;
                let dir = RunDir::create(&run, &cfg)?;
                let mut trainer = Trainer::new(&cfg, train)?;
                log::info!("{} parameters", trainer.network().num_parameters());
                train_loop(&mut trainer, &cfg, Some(&dir))?;
            }
        }
        Command::Separate {
            config,
            model,
            input,
            out,
            mode,
        } => {
            let (net, cfg) = load_model(&model, &config)?;
            let mixture = read_wav(&input).with_context(|| format!("reading {}", input.display()))?;
            let mixture = dasep_core::audio_io::resample(&mixture, cfg.sample_rate)?;
            let dir = RunDir::create(&out, &cfg)?;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("mixture");
            for p in separate_to_run(&net, &mixture, &cfg, mode, &dir, stem)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate {
            config,
            model,
            manifest,
            out,
            mode,
            limit,
        } => {
            let (net, cfg) = load_model(&model, &config)?;
            let entries = read_manifest(&manifest)?;
            let n = limit.unwrap_or(entries.len()).min(entries.len());
            let dir = RunDir::create(&out, &cfg)?;
            let examples = entries[..n].iter().enumerate().map(|(i, e)| {
                let (m, s) = load_entry(e)?;
                Ok((format!("{i:05}"), m, s))
            });
            let s = evaluate(Some(&net), examples, &cfg, mode, Some(&dir))?;
            println!("examples  {}", s.examples);
            println!("model     {:.2} dB", s.model_sdr_db);
            println!("oracle    {:.2} dB", s.oracle_sdr_db);
            println!("mixture   {:.2} dB", s.mixture_sdr_db);
        }
        Command::ExpLength(a) => {
            let (net, cfg) = load_model(&a.model, &a.config)?;
            let (_, test) = speakers(&cfg, a.data.as_deref())?;
            let dir = RunDir::create(&a.out, &cfg)?;
            let rows = length_experiment(&net, &test, &cfg)?;
            write_rows(&dir, "length.csv", &rows)?;
            let (first, last) = length_summary(&rows);
            println!("first window {first:.2} dB, last window {last:.2} dB");
        }
        Command::ExpNoise(a) => {
            let (net, cfg) = load_model(&a.model, &a.config)?;
            let (_, test) = speakers(&cfg, a.data.as_deref())?;
            let dir = RunDir::create(&a.out, &cfg)?;
            let rows = noise_experiment(&net, &test, &cfg)?;
            write_rows(&dir, "noise.csv", &rows)?;
            let s = noise_summary(&rows, &cfg);
            println!("pre-burst     {:.2} dB (clean run {:.2} dB)", s.pre_burst_db, s.clean_pre_burst_db);
            println!("burst window  {:.2} dB (clean run {:.2} dB)", s.burst_window_db, s.clean_burst_window_db);
            println!("final window  {:.2} dB", s.final_db);
        }
        Command::ExpShift(a) => {
            let (net, cfg) = load_model(&a.model, &a.config)?;
            let (_, test) = speakers(&cfg, a.data.as_deref())?;
            let shifted = shifted_corpus(&cfg)?;
            let dir = RunDir::create(&a.out, &cfg)?;
            let rows = shift_experiment(&net, &test, &shifted, &cfg)?;
            write_rows(&dir, "shift.csv", &rows)?;
            println!("condition  model_db  oracle_db");
            for (name, (m, o)) in ["in_dist", "shifted", "reverb"].iter().zip(shift_summary(&rows)) {
                println!("{name:<10} {m:>8.2}  {o:>9.2}");
            }
        }
        Command::GradCheck { seed, coords } => {
            let opts = end_to_end_options(seed, coords);
            let r = end_to_end_loss_check(seed, &opts)?;
            println!(
                "checked {} coordinates ({} non-smooth skipped), max relative error {:.3e}",
                r.checked, r.non_smooth, r.max_rel_error
            );
            if !r.passes(1e-4) {
                return Err(Error::Numerical(format!("gradient check failed: {:?}", r.worst)).into());
            }
        }
        Command::Info { config, checkpoint } => {
            let (net_cfg, cfg) = match &checkpoint {
                Some(p) => {
                    let p = checkpoint_file(p)?;
                    (network_config_for(&p)?, load_config(&config, snapshot_for(&p).as_deref())?)
                }
                None => {
                    let cfg = load_config(&config, None)?;
                    (cfg.network(), cfg)
                }
            };
            let net = Network::build(&net_cfg, cfg.seed)?;
            let rf = receptive_field(&net_cfg);
            println!("layers            {}", net_cfg.layers.len());
            println!("parameters        {}", net.num_parameters());
            println!("receptive field   {} frames ({} bins)", rf.rf_time, rf.rf_freq);
            println!("fixed lag         {} frames", rf.lag);
            println!("embedding dim     {}", net_cfg.layers.last().map_or(0, |l| l.channels));
            println!("segment frames    {}", cfg.segment_frames);
        }
    }
    Ok(())
}

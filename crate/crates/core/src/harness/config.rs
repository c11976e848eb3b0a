use std::fmt::Write as _;
use std::path::Path;

use dasep_autodiff::PiecewiseConstant;

use crate::attractor::KMeansOptions;
use crate::embednet::NetworkConfig;
use crate::error::{Error, Result};
use crate::kv;

/// Every knob of a run. Serialized as `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub sample_rate: u32,
    /// `synthetic` or a directory of per-speaker WAV subdirectories.
    pub corpus: String,
    pub speaker_seconds: f64,
    /// Indices (into the id-sorted speaker list) held out for testing.
    pub test_speakers: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub snr_min_db: f64,
    pub snr_max_db: f64,

    pub segment_frames: usize,
    pub embedding_dim: usize,
    pub hidden_channels: usize,
    pub dilations: Vec<usize>,
    pub alpha: f64,

    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub lr_boundaries: Vec<u64>,
    pub lr_multipliers: Vec<f64>,
    pub checkpoint_every: u64,
    pub validate_every: u64,
    pub validation_examples: usize,

    pub kmeans_restarts: usize,
    pub kmeans_iters: usize,
    pub eval_window: usize,

    pub length_frames: usize,
    pub length_mixtures: usize,
    pub noise_frames: usize,
    pub noise_seconds: f64,
    pub noise_level_db: f64,
    pub noise_mixtures: usize,
    pub shift_mixtures: usize,
    pub rt60: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            sample_rate: 8000,
            corpus: "synthetic".into(),
            speaker_seconds: 90.0,
            test_speakers: vec![2, 5],
            n_train: 200,
            n_test: 100,
            snr_min_db: -5.0,
            snr_max_db: 5.0,
            segment_frames: 400,
            embedding_dim: 20,
            hidden_channels: 128,
            dilations: vec![1, 2, 4, 8, 16, 32, 1, 2, 4, 8, 16, 32],
            alpha: 0.6,
            batch_size: 4,
            steps: 20_000,
            learning_rate: 1e-3,
            lr_boundaries: vec![10_000, 50_000, 100_000],
            lr_multipliers: vec![1.0, 0.5, 0.1, 0.01],
            checkpoint_every: 1000,
            validate_every: 1000,
            validation_examples: 8,
            kmeans_restarts: 10,
            kmeans_iters: 100,
            eval_window: 400,
            length_frames: 10_000,
            length_mixtures: 3,
            noise_frames: 1200,
            noise_seconds: 0.25,
            noise_level_db: 0.0,
            noise_mixtures: 8,
            shift_mixtures: 20,
            rt60: 0.3,
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig::dilated(
            crate::dsp::StftConfig::for_rate(self.sample_rate).n_bins(),
            self.hidden_channels,
            &self.dilations,
            self.embedding_dim,
        )
    }

    pub fn schedule(&self) -> Result<PiecewiseConstant> {
        Ok(PiecewiseConstant::new(
            self.learning_rate,
            self.lr_boundaries.clone(),
            self.lr_multipliers.clone(),
        )?)
    }

    pub fn kmeans(&self, seed: u64) -> KMeansOptions {
        KMeansOptions {
            restarts: self.kmeans_restarts,
            max_iters: self.kmeans_iters,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.snr_min_db > self.snr_max_db {
            return bad("snr_min_db exceeds snr_max_db");
        }
        if self.segment_frames == 0 || self.batch_size == 0 || self.eval_window == 0 {
            return bad("segment_frames, batch_size and eval_window must be positive");
        }
        if self.embedding_dim == 0 || self.hidden_channels == 0 {
            return bad("embedding_dim and hidden_channels must be positive");
        }
        if self.kmeans_restarts == 0 || self.kmeans_iters == 0 {
            return bad("kmeans_restarts and kmeans_iters must be positive");
        }
        if self.checkpoint_every == 0 || self.validate_every == 0 {
            return bad("checkpoint_every and validate_every must be positive");
        }
        if !(self.speaker_seconds > 0.0) {
            return bad("speaker_seconds must be positive");
        }
        self.schedule()?;
        self.network().validate()?;
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = kv::value(key, v)?,
            "sample_rate" => self.sample_rate = kv::value(key, v)?,
            "corpus" => self.corpus = v.to_string(),
            "speaker_seconds" => self.speaker_seconds = kv::value(key, v)?,
            "test_speakers" => self.test_speakers = kv::list(key, v)?,
            "n_train" => self.n_train = kv::value(key, v)?,
            "n_test" => self.n_test = kv::value(key, v)?,
            "snr_min_db" => self.snr_min_db = kv::value(key, v)?,
            "snr_max_db" => self.snr_max_db = kv::value(key, v)?,
            "segment_frames" => self.segment_frames = kv::value(key, v)?,
            "embedding_dim" => self.embedding_dim = kv::value(key, v)?,
            "hidden_channels" => self.hidden_channels = kv::value(key, v)?,
            "dilations" => self.dilations = kv::list(key, v)?,
            "alpha" => self.alpha = kv::value(key, v)?,
            "batch_size" => self.batch_size = kv::value(key, v)?,
            "steps" => self.steps = kv::value(key, v)?,
            "learning_rate" => self.learning_rate = kv::value(key, v)?,
            "lr_boundaries" => self.lr_boundaries = kv::list(key, v)?,
            "lr_multipliers" => self.lr_multipliers = kv::list(key, v)?,
            "checkpoint_every" => self.checkpoint_every = kv::value(key, v)?,
            "validate_every" => self.validate_every = kv::value(key, v)?,
            "validation_examples" => self.validation_examples = kv::value(key, v)?,
            "kmeans_restarts" => self.kmeans_restarts = kv::value(key, v)?,
            "kmeans_iters" => self.kmeans_iters = kv::value(key, v)?,
            "eval_window" => self.eval_window = kv::value(key, v)?,
            "length_frames" => self.length_frames = kv::value(key, v)?,
            "length_mixtures" => self.length_mixtures = kv::value(key, v)?,
            "noise_frames" => self.noise_frames = kv::value(key, v)?,
            "noise_seconds" => self.noise_seconds = kv::value(key, v)?,
            "noise_level_db" => self.noise_level_db = kv::value(key, v)?,
            "noise_mixtures" => self.noise_mixtures = kv::value(key, v)?,
            "shift_mixtures" => self.shift_mixtures = kv::value(key, v)?,
            "rt60" => self.rt60 = kv::value(key, v)?,
            _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides, as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in kv::parse(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_kv_str(&text)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("sample_rate", self.sample_rate.to_string());
        put("corpus", self.corpus.clone());
        put("speaker_seconds", self.speaker_seconds.to_string());
        put("test_speakers", join(&self.test_speakers));
        put("n_train", self.n_train.to_string());
        put("n_test", self.n_test.to_string());
        put("snr_min_db", self.snr_min_db.to_string());
        put("snr_max_db", self.snr_max_db.to_string());
        put("segment_frames", self.segment_frames.to_string());
        put("embedding_dim", self.embedding_dim.to_string());
        put("hidden_channels", self.hidden_channels.to_string());
        put("dilations", join(&self.dilations));
        put("alpha", self.alpha.to_string());
        put("batch_size", self.batch_size.to_string());
        put("steps", self.steps.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("lr_boundaries", join(&self.lr_boundaries));
        put("lr_multipliers", join(&self.lr_multipliers));
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("validate_every", self.validate_every.to_string());
        put("validation_examples", self.validation_examples.to_string());
        put("kmeans_restarts", self.kmeans_restarts.to_string());
        put("kmeans_iters", self.kmeans_iters.to_string());
        put("eval_window", self.eval_window.to_string());
        put("length_frames", self.length_frames.to_string());
        put("length_mixtures", self.length_mixtures.to_string());
        put("noise_frames", self.noise_frames.to_string());
        put("noise_seconds", self.noise_seconds.to_string());
        put("noise_level_db", self.noise_level_db.to_string());
        put("noise_mixtures", self.noise_mixtures.to_string());
        put("shift_mixtures", self.shift_mixtures.to_string());
        put("rt60", self.rt60.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["steps=50", "dilations = 1,2", "test_speakers=0,1"]).unwrap();
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.dilations, vec![1, 2]);
        let back = RunConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.apply_overrides(&["nonsense=1"]).is_err());
        assert!(cfg.apply_overrides(&["steps"]).is_err());
    }

    #[test]
    fn default_matches_reference_settings() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.segment_frames, cfg.embedding_dim, cfg.alpha), (400, 20, 0.6));
        let sched = cfg.schedule().unwrap();
        assert_eq!(sched.lr(9_999), 1e-3);
        assert_eq!(sched.lr(10_000), 5e-4);
        assert!((sched.lr(100_000) - 1e-5).abs() < 1e-18);
        assert_eq!(cfg.network(), NetworkConfig::default());
    }

    #[test]
    fn invalid_schedule_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.lr_boundaries = vec![10, 5];
        assert!(cfg.validate().is_err());
        cfg.lr_boundaries = vec![10];
        assert!(cfg.validate().is_err());
    }
}

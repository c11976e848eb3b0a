//! Speaker corpora, train/test splits and mixture manifests.

use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::audio_io::{read_wav, resample, write_wav, Waveform};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::mixgen::{
    default_speakers, make_mixture, sample_pair, shifted_speakers, synth_speaker, MixtureExample, Speaker,
    SpeakerSpec,
};

pub const SPEAKERS_FILE: &str = "speakers.tsv";
pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const TEST_MANIFEST: &str = "test.tsv";

fn synthesize(specs: &[SpeakerSpec], prefix: &str, cfg: &RunConfig) -> Result<Vec<Speaker>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(Speaker {
                id: format!("{prefix}{i}"),
                utterances: vec![synth_speaker(s, cfg.speaker_seconds, cfg.sample_rate)?],
            })
        })
        .collect()
}

/// The eight default synthetic speakers.
pub fn synthetic_corpus(cfg: &RunConfig) -> Result<Vec<Speaker>> {
    synthesize(&default_speakers(cfg.sample_rate), "spk", cfg)
}

/// Synthetic speakers outside the default corpus distribution.
pub fn shifted_corpus(cfg: &RunConfig) -> Result<Vec<Speaker>> {
    synthesize(&shifted_speakers(cfg.sample_rate), "shift", cfg)
}

/// Loads `dir/<speaker>/**/*.wav`, one speaker per subdirectory, sorted by
/// name and resampled to `rate`.
pub fn load_corpus_dir(dir: &Path, rate: u32) -> Result<Vec<Speaker>> {
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut speakers = Vec::new();
    for sub in subdirs {
        let mut files = Vec::new();
        collect_wavs(&sub, &mut files)?;
        files.sort();
        if files.is_empty() {
            continue;
        }
        let utterances = files
            .iter()
            .map(|f| {
                let w = read_wav(f)?;
                if w.sample_rate() == rate {
                    Ok(w)
                } else {
                    resample(&w, rate)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let id = sub
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        speakers.push(Speaker { id, utterances });
    }
    Ok(speakers)
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_wavs(&p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(p);
        }
    }
    Ok(())
}

/// The corpus named by `cfg.corpus`.
pub fn load_corpus(cfg: &RunConfig) -> Result<Vec<Speaker>> {
    if cfg.corpus == "synthetic" {
        synthetic_corpus(cfg)
    } else {
        load_corpus_dir(Path::new(&cfg.corpus), cfg.sample_rate)
    }
}

/// Splits speakers into (train, test) by index.
pub fn split_speakers(speakers: Vec<Speaker>, test: &[usize]) -> Result<(Vec<Speaker>, Vec<Speaker>)> {
    if let Some(&bad) = test.iter().find(|&&i| i >= speakers.len()) {
        return Err(Error::Corpus(format!(
            "test speaker index {bad} out of range for {} speakers",
            speakers.len()
        )));
    }
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, s) in speakers.into_iter().enumerate() {
        if test.contains(&i) {
            held.push(s);
        } else {
            train.push(s);
        }
    }
    if train.len() < 2 || held.len() < 2 {
        return Err(Error::Corpus(format!(
            "need at least 2 speakers on each side of the split, got {} train / {} test",
            train.len(),
            held.len()
        )));
    }
    Ok((train, held))
}

/// A mixture drawn for a given frame count, with its provenance.
#[derive(Clone, Debug)]
pub struct DrawnExample {
    pub example: MixtureExample,
    pub speakers: (String, String),
    pub offsets: (usize, usize),
}

pub fn samples_for_frames(cfg: &RunConfig, frames: usize) -> usize {
    StftConfig::for_rate(cfg.sample_rate).samples_for_frames(frames)
}

/// Two distinct speakers, random crops, SNR uniform on the configured range.
pub fn draw_example<R: Rng>(
    speakers: &[Speaker],
    frames: usize,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<DrawnExample> {
    let len = samples_for_frames(cfg, frames);
    for _ in 0..100 {
        let pair = sample_pair(speakers, len, rng)?;
        let snr = if cfg.snr_max_db > cfg.snr_min_db {
            rng.gen_range(cfg.snr_min_db..cfg.snr_max_db)
        } else {
            cfg.snr_min_db
        };
        match make_mixture(&pair.a, &pair.b, snr) {
            Ok(example) => {
                return Ok(DrawnExample {
                    example,
                    speakers: (
                        speakers[pair.speakers.0].id.clone(),
                        speakers[pair.speakers.1].id.clone(),
                    ),
                    offsets: pair.offsets,
                })
            }
            Err(Error::DegenerateSource(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Corpus("could not draw a non-silent pair in 100 attempts".into()))
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub mixture: PathBuf,
    pub sources: Vec<PathBuf>,
    pub snr_db: f64,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)?,
    );
    for e in entries {
        let mut fields = vec![e.mixture.display().to_string()];
        fields.extend(e.sources.iter().map(|s| s.display().to_string()));
        fields.push(format!("{}", e.snr_db));
        writeln!(out, "{}", fields.join("\t"))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(path)?;
    let mut entries = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(Error::Data(format!(
                "{}:{}: expected mixture, two sources and snr_db",
                path.display(),
                n + 1
            )));
        }
        let resolve = |s: &str| {
            let p = PathBuf::from(s);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let snr_db = fields[fields.len() - 1]
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad snr_db", path.display(), n + 1)))?;
        entries.push(ManifestEntry {
            mixture: resolve(fields[0]),
            sources: fields[1..fields.len() - 1].iter().map(|s| resolve(s)).collect(),
            snr_db,
        });
    }
    Ok(entries)
}

/// A loaded manifest example.
pub fn load_entry(e: &ManifestEntry) -> Result<(Waveform, Vec<Waveform>)> {
    let mixture = read_wav(&e.mixture)?;
    let sources = e.sources.iter().map(read_wav).collect::<Result<Vec<_>>>()?;
    if sources.is_empty() {
        return Err(Error::Data(format!("{}: no ground-truth sources", e.mixture.display())));
    }
    if sources.iter().any(|s| s.len() != mixture.len()) {
        return Err(Error::Data(format!(
            "{}: sources and mixture differ in length",
            e.mixture.display()
        )));
    }
    Ok((mixture, sources))
}

/// Result of [`synth_data`].
#[derive(Clone, Debug)]
pub struct SynthSummary {
    pub train_speakers: Vec<String>,
    pub test_speakers: Vec<String>,
    pub train: Vec<(ManifestEntry, (String, String))>,
    pub test: Vec<(ManifestEntry, (String, String))>,
}

/// Writes the speaker corpus, the split and train/test mixture manifests
/// under `out`, which must be absent or empty. Test mixtures use only
/// held-out speakers.
pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<SynthSummary> {
    if out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        return Err(Error::Data(format!("{} exists and is not empty", out.display())));
    }
    let corpus = load_corpus(cfg)?;
    std::fs::create_dir_all(out)?;
    let spk_dir = out.join("speakers");
    let mut split = String::new();
    for (i, s) in corpus.iter().enumerate() {
        let d = spk_dir.join(&s.id);
        std::fs::create_dir_all(&d)?;
        for (u, w) in s.utterances.iter().enumerate() {
            write_wav(d.join(format!("utt{u:03}.wav")), w)?;
        }
        let role = if cfg.test_speakers.contains(&i) { "test" } else { "train" };
        split.push_str(&format!("{}\t{role}\n", s.id));
    }
    let (train, test) = split_speakers(corpus, &cfg.test_speakers)?;
    let path = out.join(SPEAKERS_FILE);
    std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&path)?
        .write_all(split.as_bytes())?;

    let make = |name: &str, speakers: &[Speaker], n: usize, stream: u64| -> Result<Vec<(ManifestEntry, (String, String))>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        let dir = out.join(name);
        std::fs::create_dir_all(&dir)?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let d = draw_example(speakers, cfg.segment_frames, cfg, &mut rng)?;
            let stem = format!("{name}/{i:06}");
            let mix = PathBuf::from(format!("{stem}_mix.wav"));
            let srcs = vec![
                PathBuf::from(format!("{stem}_s1.wav")),
                PathBuf::from(format!("{stem}_s2.wav")),
            ];
            write_wav(out.join(&mix), &d.example.mixture)?;
            for (p, s) in srcs.iter().zip(&d.example.sources) {
                write_wav(out.join(p), s)?;
            }
            rows.push((
                ManifestEntry {
                    mixture: mix,
                    sources: srcs,
                    snr_db: d.example.snr_db,
                },
                d.speakers,
            ));
        }
        let entries: Vec<ManifestEntry> = rows.iter().map(|(e, _)| e.clone()).collect();
        write_manifest(&out.join(format!("{name}.tsv")), &entries)?;
        Ok(rows)
    };
    let train_rows = make("train", &train, cfg.n_train, 1)?;
    let test_rows = make("test", &test, cfg.n_test, 2)?;
    Ok(SynthSummary {
        train_speakers: train.iter().map(|s| s.id.clone()).collect(),
        test_speakers: test.iter().map(|s| s.id.clone()).collect(),
        train: train_rows,
        test: test_rows,
    })
}

/// Training speakers recorded by [`synth_data`] in `data_dir`.
pub fn load_training_speakers(data_dir: &Path, rate: u32) -> Result<(Vec<Speaker>, Vec<Speaker>)> {
    let split_path = data_dir.join(SPEAKERS_FILE);
    let text = std::fs::read_to_string(&split_path)
        .map_err(|e| Error::Data(format!("{}: {e}", split_path.display())))?;
    let all = load_corpus_dir(&data_dir.join("speakers"), rate)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (id, role) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("{}: malformed line {line:?}", split_path.display())))?;
        let spk = all
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Data(format!("speaker {id} has no audio")))?
            .clone();
        match role {
            "train" => train.push(spk),
            "test" => test.push(spk),
            _ => return Err(Error::Data(format!("unknown split {role:?} for {id}"))),
        }
    }
    if train.len() < 2 {
        return Err(Error::Corpus("fewer than 2 training speakers".into()));
    }
    Ok((train, test))
}

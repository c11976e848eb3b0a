//! Separation inference and scoring shared by the commands.

use crate::attractor::{
    compute_mask, estimate_sources, ideal_binary_mask, kmeans_attractors, threshold, AttractorSet, KMeansOptions,
    MaskMode, MaskTensor,
};
use crate::audio_io::Waveform;
use crate::bsseval::{score_with, ReferenceSet, SeparationScore, DEFAULT_FILT_LEN};
use crate::dsp::{log_magnitude, resynthesize, stft, ComplexSpectrogram, MagnitudeSpectrogram, LOG_FLOOR};
use crate::embednet::{concat_frames, EmbeddingTensor, Network};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceMode {
    Batch,
    Streaming,
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(InferenceMode::Batch),
            "streaming" => Ok(InferenceMode::Streaming),
            _ => Err(Error::Config(format!("mode must be batch or streaming, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InferenceConfig {
    pub alpha: f64,
    pub n_sources: usize,
    pub kmeans: KMeansOptions,
}

/// Output of one separation.
#[derive(Clone, Debug)]
pub struct Separation {
    pub attractors: AttractorSet,
    pub mask: MaskTensor,
    pub magnitudes: Vec<MagnitudeSpectrogram>,
    /// Resynthesized estimates, zero-padded to the mixture length.
    pub estimates: Vec<Waveform>,
}

/// Embeddings of a whole spectrogram in either mode.
pub fn embed(net: &Network, spec: &ComplexSpectrogram, mode: InferenceMode) -> Result<EmbeddingTensor> {
    let feats = log_magnitude(spec, LOG_FLOOR)?;
    match mode {
        InferenceMode::Batch => net.forward(&feats),
        InferenceMode::Streaming => {
            let mut s = net.streaming();
            // Feed in hop-sized pieces as a live source would.
            let chunk = 16;
            let mut parts = Vec::new();
            let mut start = 0;
            while start < feats.n_frames {
                let len = chunk.min(feats.n_frames - start);
                parts.push(s.push(start, &feats.frames(start, len)?)?);
                start += len;
            }
            parts.push(s.finish()?);
            concat_frames(&parts)
        }
    }
}

/// Threshold, K-means attractors, hard mask and mixture-phase resynthesis
/// for one spectrogram and its embeddings.
pub fn separate_embedded(
    spec: &ComplexSpectrogram,
    v: &EmbeddingTensor,
    cfg: &InferenceConfig,
    out_len: usize,
) -> Result<Separation> {
    let feats = log_magnitude(spec, LOG_FLOOR)?;
    let h = threshold(&feats, cfg.alpha)?;
    let km = kmeans_attractors(v, &h, cfg.n_sources, &cfg.kmeans)?;
    let mask = compute_mask(v, &km.attractors, MaskMode::Hard)?;
    finish(spec, km.attractors, mask, out_len)
}

fn finish(spec: &ComplexSpectrogram, attractors: AttractorSet, mask: MaskTensor, out_len: usize) -> Result<Separation> {
    let magnitudes = estimate_sources(&mask, &spec.magnitude())?;
    let estimates = magnitudes
        .iter()
        .map(|m| Ok(pad_to(resynthesize(m, spec)?, out_len)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Separation {
        attractors,
        mask,
        magnitudes,
        estimates,
    })
}

pub fn pad_to(w: Waveform, len: usize) -> Waveform {
    let rate = w.sample_rate();
    let mut s = w.into_samples();
    s.resize(len, 0.0);
    Waveform::new(s, rate).expect("padding keeps samples finite")
}

/// Full separation of a mixture waveform.
pub fn separate(net: &Network, mixture: &Waveform, cfg: &InferenceConfig, mode: InferenceMode) -> Result<Separation> {
    let spec = stft(mixture)?;
    let v = embed(net, &spec, mode)?;
    separate_embedded(&spec, &v, cfg, mixture.len())
}

/// Separation with the ideal binary mask computed from the true sources.
pub fn oracle_separation(mixture: &Waveform, sources: &[Waveform]) -> Result<Separation> {
    let spec = stft(mixture)?;
    let mags = sources
        .iter()
        .map(|s| Ok(stft(s)?.magnitude()))
        .collect::<Result<Vec<_>>>()?;
    let labels = ideal_binary_mask(&mags)?;
    let attractors = AttractorSet {
        values: Vec::new(),
        counts: labels.counts(),
        dim: 0,
    };
    finish(&spec, attractors, labels.to_mask(), mixture.len())
}

/// Model, oracle and mixture-baseline scores of one example.
#[derive(Clone, Debug)]
pub struct ExampleScores {
    pub model: Option<SeparationScore>,
    pub oracle: SeparationScore,
    pub mixture: SeparationScore,
}

pub fn score_example(
    net: Option<&Network>,
    mixture: &Waveform,
    sources: &[Waveform],
    cfg: &InferenceConfig,
    mode: InferenceMode,
) -> Result<ExampleScores> {
    let refs = ReferenceSet::new(sources, DEFAULT_FILT_LEN)?;
    let model = match net {
        Some(net) => Some(score_with(&refs, &separate(net, mixture, cfg, mode)?.estimates)?),
        None => None,
    };
    let oracle = score_with(&refs, &oracle_separation(mixture, sources)?.estimates)?;
    let mixture = score_with(&refs, &vec![mixture.clone(); sources.len()])?;
    Ok(ExampleScores { model, oracle, mixture })
}

/// Per-window scores of a long mixture.
#[derive(Clone, Debug)]
pub struct WindowScore {
    pub start_frame: usize,
    pub score: SeparationScore,
}

/// Runs the network once over the whole mixture, then separates and scores
/// each `window`-frame segment (stride `window`) independently against the
/// matching slices of the references.
pub fn windowed_scores(
    net: &Network,
    mixture: &Waveform,
    refs: &[Waveform],
    window: usize,
    cfg: &InferenceConfig,
) -> Result<Vec<WindowScore>> {
    let spec = stft(mixture)?;
    let v = net.forward(&log_magnitude(&spec, LOG_FLOOR)?)?;
    windowed_scores_embedded(&spec, &v, refs, window, cfg)
}

pub fn windowed_scores_embedded(
    spec: &ComplexSpectrogram,
    v: &EmbeddingTensor,
    refs: &[Waveform],
    window: usize,
    cfg: &InferenceConfig,
) -> Result<Vec<WindowScore>> {
    if spec.n_frames < window {
        return Err(Error::Size(format!(
            "{} frames cannot hold a {window}-frame window",
            spec.n_frames
        )));
    }
    let hop = spec.config.hop;
    let seg_len = spec.config.samples_for_frames(window);
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= spec.n_frames {
        let sub = spec.frames(start, window)?;
        let sv = v.frames(start, window)?;
        let sep = separate_embedded(&sub, &sv, cfg, seg_len)?;
        let ref_slices = refs
            .iter()
            .map(|r| r.slice(start * hop, seg_len))
            .collect::<Result<Vec<_>>>()?;
        let set = ReferenceSet::new(&ref_slices, DEFAULT_FILT_LEN)?;
        out.push(WindowScore {
            start_frame: start,
            score: score_with(&set, &sep.estimates)?,
        });
        start += window;
    }
    Ok(out)
}

/// Oracle-IBM scores per window, for comparison with [`windowed_scores`].
pub fn windowed_oracle_scores(mixture: &Waveform, refs: &[Waveform], window: usize) -> Result<Vec<WindowScore>> {
    let hop = crate::dsp::StftConfig::for_rate(mixture.sample_rate()).hop;
    let seg_len = crate::dsp::StftConfig::for_rate(mixture.sample_rate()).samples_for_frames(window);
    let n_frames = stft(mixture)?.n_frames;
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= n_frames {
        let m = mixture.slice(start * hop, seg_len)?;
        let r = refs
            .iter()
            .map(|x| x.slice(start * hop, seg_len))
            .collect::<Result<Vec<_>>>()?;
        let set = ReferenceSet::new(&r, DEFAULT_FILT_LEN)?;
        out.push(WindowScore {
            start_frame: start,
            score: score_with(&set, &oracle_separation(&m, &r)?.estimates)?,
        });
        start += window;
    }
    Ok(out)
}

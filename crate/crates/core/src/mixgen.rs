//! Synthetic harmonic speakers, two-source mixtures at a target SNR, and the
//! perturbations used by the generalization experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio_io::{rms, Waveform};
use crate::dsp::fft_convolve;
use crate::error::{Error, Result};

/// Peak level of a synthesized speaker.
pub const SPEAKER_PEAK: f64 = 0.5;
/// Peak ceiling applied jointly to a mixture and its sources.
pub const MIXTURE_PEAK: f64 = 0.9;
/// Control rate of the fundamental-frequency random walk.
const F0_CONTROL_HZ: f64 = 100.0;

/// Parameters of a synthetic harmonic "speaker".
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerSpec {
    pub f0_base: f64,
    /// Bound on the fundamental's deviation from `f0_base`.
    pub f0_wander: f64,
    pub n_harmonics: usize,
    /// Amplitude-modulation rate in Hz.
    pub am_rate: f64,
    pub seed: u64,
}

impl SpeakerSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.f0_base > 0.0) || self.f0_wander < 0.0 || self.f0_wander >= self.f0_base {
            return Err(Error::Spec(format!(
                "need 0 <= f0_wander < f0_base, got {} / {}",
                self.f0_wander, self.f0_base
            )));
        }
        if self.n_harmonics == 0 {
            return Err(Error::Spec("at least one harmonic is required".into()));
        }
        let top = (self.f0_base + self.f0_wander) * self.n_harmonics as f64;
        if top >= nyquist {
            return Err(Error::Spec(format!(
                "harmonic {} can reach {top:.1} Hz, above Nyquist {nyquist} Hz",
                self.n_harmonics
            )));
        }
        if self.am_rate < 0.0 {
            return Err(Error::Spec("am_rate must be nonnegative".into()));
        }
        Ok(())
    }
}

/// The eight-speaker desk corpus: distinct fundamentals in 100–300 Hz and
/// distinct modulation rates.
pub fn default_speakers(sample_rate: u32) -> Vec<SpeakerSpec> {
    const F0: [f64; 8] = [105.0, 130.0, 155.0, 180.0, 205.0, 230.0, 255.0, 280.0];
    const AM: [f64; 8] = [2.1, 3.3, 4.5, 2.7, 3.9, 5.1, 2.4, 3.6];
    speaker_family(&F0, &AM, 12.0, sample_rate, 1000)
}

/// A speaker set outside the default corpus distribution: higher voices
/// with faster modulation.
pub fn shifted_speakers(sample_rate: u32) -> Vec<SpeakerSpec> {
    const F0: [f64; 4] = [310.0, 335.0, 360.0, 385.0];
    const AM: [f64; 4] = [6.0, 6.8, 7.6, 8.4];
    speaker_family(&F0, &AM, 12.0, sample_rate, 2000)
}

pub fn speaker_family(
    f0: &[f64],
    am: &[f64],
    wander: f64,
    sample_rate: u32,
    seed_base: u64,
) -> Vec<SpeakerSpec> {
    let limit = 0.475 * sample_rate as f64;
    f0.iter()
        .zip(am)
        .enumerate()
        .map(|(i, (&f, &a))| SpeakerSpec {
            f0_base: f,
            f0_wander: wander,
            n_harmonics: ((limit / (f + wander)).floor() as usize).clamp(1, 16),
            am_rate: a,
            seed: seed_base + i as u64,
        })
        .collect()
}

/// Harmonic stack at multiples of a wandering fundamental with `1/k`
/// amplitudes and a `(1 + 0.5·sin(2π·am_rate·t))` envelope, peak-normalized.
pub fn synth_speaker(spec: &SpeakerSpec, duration: f64, sample_rate: u32) -> Result<Waveform> {
    spec.validate(sample_rate)?;
    if !(duration > 0.0) {
        return Err(Error::Spec("duration must be positive".into()));
    }
    let rate = sample_rate as f64;
    let len = (duration * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Bounded random walk of the fundamental on a coarse control grid.
    let per_control = rate / F0_CONTROL_HZ;
    let n_control = (len as f64 / per_control).ceil() as usize + 2;
    let step = spec.f0_wander * 0.08;
    let mut offsets = Vec::with_capacity(n_control);
    let mut dev = 0.0f64;
    for _ in 0..n_control {
        offsets.push(dev);
        let z: f64 = StandardNormal.sample(&mut rng);
        dev += step * z;
        if dev > spec.f0_wander {
            dev = 2.0 * spec.f0_wander - dev;
        } else if dev < -spec.f0_wander {
            dev = -2.0 * spec.f0_wander - dev;
        }
        dev = dev.clamp(-spec.f0_wander, spec.f0_wander);
    }
    let phases: Vec<f64> = (0..spec.n_harmonics)
        .map(|k| if k == 0 { 0.0 } else { rng.gen_range(0.0..std::f64::consts::TAU) })
        .collect();

    let mut out = Vec::with_capacity(len);
    let mut phase = 0.0f64;
    for n in 0..len {
        let pos = n as f64 / per_control;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        let f0 = spec.f0_base + offsets[i] * (1.0 - frac) + offsets[i + 1] * frac;
        let t = n as f64 / rate;
        let mut v = 0.0;
        for (k, ph) in phases.iter().enumerate() {
            let h = (k + 1) as f64;
            v += (h * phase + ph).sin() / h;
        }
        let env = 1.0 + 0.5 * (std::f64::consts::TAU * spec.am_rate * t).sin();
        out.push(v * env);
        phase = (phase + std::f64::consts::TAU * f0 / rate) % std::f64::consts::TAU;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= SPEAKER_PEAK / peak);
    }
    Waveform::new(out, sample_rate)
}

/// A mixture and the (scaled) sources that sum to it.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureExample {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    pub snr_db: f64,
}

/// Mixes `a` and `b` so that `20·log10(rms(a) / rms(g·b)) = snr_db`, then
/// scales all three signals jointly so the mixture peak is at most 0.9.
pub fn make_mixture(a: &Waveform, b: &Waveform, snr_db: f64) -> Result<MixtureExample> {
    if a.len() != b.len() || a.sample_rate() != b.sample_rate() {
        return Err(Error::Size(format!(
            "sources differ: {} @ {} Hz vs {} @ {} Hz",
            a.len(),
            a.sample_rate(),
            b.len(),
            b.sample_rate()
        )));
    }
    let (ra, rb) = (a.rms(), b.rms());
    if ra == 0.0 {
        return Err(Error::DegenerateSource(0));
    }
    if rb == 0.0 {
        return Err(Error::DegenerateSource(1));
    }
    let g = snr_gain(ra, rb, snr_db);
    let sum_peak = a
        .samples()
        .iter()
        .zip(b.samples())
        .fold(0.0f64, |m, (x, y)| m.max((x + g * y).abs()));
    let joint = if sum_peak > MIXTURE_PEAK {
        MIXTURE_PEAK / sum_peak
    } else {
        1.0
    };
    let s0 = a.scaled(joint);
    let s1 = b.scaled(g * joint);
    let mix: Vec<f64> = s0
        .samples()
        .iter()
        .zip(s1.samples())
        .map(|(x, y)| x + y)
        .collect();
    Ok(MixtureExample {
        mixture: Waveform::new(mix, a.sample_rate())?,
        sources: vec![s0, s1],
        snr_db,
    })
}

/// Gain applied to the second source for a requested SNR.
pub fn snr_gain(rms_a: f64, rms_b: f64, snr_db: f64) -> f64 {
    rms_a / (rms_b * 10f64.powf(snr_db / 20.0))
}

/// Measured `20·log10(rms(a)/rms(b))`.
pub fn measured_snr_db(a: &Waveform, b: &Waveform) -> f64 {
    20.0 * (a.rms() / b.rms()).log10()
}

/// Recordings of one speaker.
#[derive(Clone, Debug)]
pub struct Speaker {
    pub id: String,
    pub utterances: Vec<Waveform>,
}

/// Two crops from two distinct speakers.
#[derive(Clone, Debug)]
pub struct SampledPair {
    pub speakers: (usize, usize),
    pub offsets: (usize, usize),
    pub a: Waveform,
    pub b: Waveform,
}

/// Picks two different speakers uniformly, one utterance each, and crops
/// `length` samples from independent uniform start offsets.
pub fn sample_pair<R: Rng>(corpus: &[Speaker], length: usize, rng: &mut R) -> Result<SampledPair> {
    if corpus.len() < 2 {
        return Err(Error::Corpus(format!(
            "need at least 2 speakers, corpus has {}",
            corpus.len()
        )));
    }
    for s in corpus {
        if !s.utterances.iter().any(|u| u.len() >= length) {
            return Err(Error::Corpus(format!(
                "speaker {} has no utterance of {length} samples",
                s.id
            )));
        }
    }
    let i = rng.gen_range(0..corpus.len());
    let mut j = rng.gen_range(0..corpus.len() - 1);
    if j >= i {
        j += 1;
    }
    let (a, oa) = crop(&corpus[i], length, rng)?;
    let (b, ob) = crop(&corpus[j], length, rng)?;
    Ok(SampledPair {
        speakers: (i, j),
        offsets: (oa, ob),
        a,
        b,
    })
}

fn crop<R: Rng>(speaker: &Speaker, length: usize, rng: &mut R) -> Result<(Waveform, usize)> {
    let usable: Vec<&Waveform> = speaker
        .utterances
        .iter()
        .filter(|u| u.len() >= length)
        .collect();
    let u = usable[rng.gen_range(0..usable.len())];
    let offset = rng.gen_range(0..=u.len() - length);
    Ok((u.slice(offset, length)?, offset))
}

/// Adds white Gaussian noise over `[center − dur/2, center + dur/2]` (seconds)
/// with RMS `level_db_rel` dB relative to the whole waveform's RMS.
pub fn inject_noise_burst(
    w: &Waveform,
    center: f64,
    dur: f64,
    level_db_rel: f64,
    seed: u64,
) -> Result<Waveform> {
    let rate = w.sample_rate() as f64;
    let start = ((center - dur / 2.0) * rate).round();
    let end = ((center + dur / 2.0) * rate).round();
    if dur < 0.0 || start < 0.0 || end > w.len() as f64 {
        return Err(Error::Range(format!(
            "burst [{:.3}, {:.3}] s outside a {:.3} s waveform",
            center - dur / 2.0,
            center + dur / 2.0,
            w.duration_secs()
        )));
    }
    let (start, end) = (start as usize, end as usize);
    let mut out = w.samples().to_vec();
    if end > start {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (start..end).map(|_| StandardNormal.sample(&mut rng)).collect();
        let target = w.rms() * 10f64.powf(level_db_rel / 20.0);
        let r = rms(&raw);
        let gain = if r > 0.0 { target / r } else { 0.0 };
        for (o, n) in out[start..end].iter_mut().zip(&raw) {
            *o += gain * n;
        }
    }
    Waveform::new(out, w.sample_rate())
}

/// Direct-to-tail amplitude ratio of the synthetic room response.
pub const RIR_TAIL_GAIN: f64 = 0.08;

/// Synthetic room impulse response: unit direct path followed by a seeded
/// Gaussian tail whose energy decays 60 dB over `rt60` seconds, truncated at
/// `3·rt60`.
pub fn room_impulse_response(rir_seed: u64, rt60: f64, sample_rate: u32) -> Result<Vec<f64>> {
    if !(rt60 > 0.0) {
        return Err(Error::Config(format!("rt60 must be positive, got {rt60}")));
    }
    let rate = sample_rate as f64;
    let len = ((3.0 * rt60 * rate).floor() as usize).max(1);
    let decay = 3.0 * std::f64::consts::LN_10 / (rt60 * rate);
    let mut rng = ChaCha8Rng::seed_from_u64(rir_seed);
    let mut h = Vec::with_capacity(len);
    h.push(1.0);
    for n in 1..len {
        let z: f64 = StandardNormal.sample(&mut rng);
        h.push(RIR_TAIL_GAIN * z * (-decay * n as f64).exp());
    }
    Ok(h)
}

/// Convolves with [`room_impulse_response`] and crops to the input length.
pub fn apply_room(w: &Waveform, rir_seed: u64, rt60: f64) -> Result<Waveform> {
    let h = room_impulse_response(rir_seed, rt60, w.sample_rate())?;
    if h.len() == 1 {
        return Ok(w.clone());
    }
    let mut y = fft_convolve(w.samples(), &h);
    y.truncate(w.len());
    Waveform::new(y, w.sample_rate())
}

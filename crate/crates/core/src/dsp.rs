//! STFT analysis, log-magnitude features and mixture-phase resynthesis.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio_io::Waveform;
use crate::error::{Error, Result};

/// Default floor added to magnitudes before taking the log.
pub const LOG_FLOOR: f64 = 1e-7;
/// Overlap-add normalizers below this fraction of the steady-state window
/// power are clamped to it, so the edges of a modified spectrogram are not
/// blown up by near-zero window sums.
const WINDOW_POWER_FLOOR: f64 = 1e-3;

/// Frame geometry: 32 ms periodic-Hann frames with an 8 ms hop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
}

impl StftConfig {
    pub fn for_rate(sample_rate: u32) -> Self {
        StftConfig {
            frame_len: (0.032 * sample_rate as f64).round() as usize,
            hop: (0.008 * sample_rate as f64).round() as usize,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            1 + (len - self.frame_len) / self.hop
        }
    }

    /// Waveform length spanned by `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_len
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::Size(format!(
                "degenerate STFT geometry: frame {} hop {}",
                self.frame_len, self.hop
            )));
        }
        Ok(())
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// One-sided complex STFT, stored frequency-major (`bins[f * n_frames + t]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: Vec<Complex64>,
    pub n_bins: usize,
    pub n_frames: usize,
    pub config: StftConfig,
    pub sample_rate: u32,
}

/// Nonnegative magnitudes, same layout and geometry as [`ComplexSpectrogram`].
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeSpectrogram {
    pub values: Vec<f64>,
    pub n_bins: usize,
    pub n_frames: usize,
    pub config: StftConfig,
    pub sample_rate: u32,
}

/// Log-magnitude network input, `log(|X| + floor_eps)`, frequency-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: Vec<f64>,
    pub n_bins: usize,
    pub n_frames: usize,
    pub floor_eps: f64,
}

impl ComplexSpectrogram {
    pub fn get(&self, f: usize, t: usize) -> Complex64 {
        self.bins[f * self.n_frames + t]
    }

    pub fn magnitude(&self) -> MagnitudeSpectrogram {
        MagnitudeSpectrogram {
            values: self.bins.iter().map(|c| c.norm()).collect(),
            n_bins: self.n_bins,
            n_frames: self.n_frames,
            config: self.config,
            sample_rate: self.sample_rate,
        }
    }

    pub fn scaled(&self, gain: f64) -> ComplexSpectrogram {
        ComplexSpectrogram {
            bins: self.bins.iter().map(|c| c * gain).collect(),
            ..self.clone()
        }
    }

    /// Frames `[start, start + len)`.
    pub fn frames(&self, start: usize, len: usize) -> Result<ComplexSpectrogram> {
        if start + len > self.n_frames {
            return Err(Error::Range(format!(
                "frames [{start}, {}) exceed {}",
                start + len,
                self.n_frames
            )));
        }
        let mut bins = Vec::with_capacity(self.n_bins * len);
        for f in 0..self.n_bins {
            bins.extend_from_slice(&self.bins[f * self.n_frames + start..][..len]);
        }
        Ok(ComplexSpectrogram {
            bins,
            n_bins: self.n_bins,
            n_frames: len,
            config: self.config,
            sample_rate: self.sample_rate,
        })
    }
}

impl MagnitudeSpectrogram {
    pub fn get(&self, f: usize, t: usize) -> f64 {
        self.values[f * self.n_frames + t]
    }

    pub fn same_geometry(&self, other: &MagnitudeSpectrogram) -> bool {
        self.n_bins == other.n_bins && self.n_frames == other.n_frames
    }

    pub fn with_values(&self, values: Vec<f64>) -> MagnitudeSpectrogram {
        MagnitudeSpectrogram {
            values,
            ..self.clone()
        }
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn frames(&self, start: usize, len: usize) -> Result<MagnitudeSpectrogram> {
        if start + len > self.n_frames {
            return Err(Error::Range(format!(
                "frames [{start}, {}) exceed {}",
                start + len,
                self.n_frames
            )));
        }
        let mut values = Vec::with_capacity(self.n_bins * len);
        for f in 0..self.n_bins {
            values.extend_from_slice(&self.values[f * self.n_frames + start..][..len]);
        }
        Ok(MagnitudeSpectrogram {
            values,
            n_bins: self.n_bins,
            n_frames: len,
            config: self.config,
            sample_rate: self.sample_rate,
        })
    }
}

impl FeatureMatrix {
    pub fn get(&self, f: usize, t: usize) -> f64 {
        self.values[f * self.n_frames + t]
    }

    pub fn frames(&self, start: usize, len: usize) -> Result<FeatureMatrix> {
        if start + len > self.n_frames {
            return Err(Error::Range(format!(
                "frames [{start}, {}) exceed {}",
                start + len,
                self.n_frames
            )));
        }
        let mut values = Vec::with_capacity(self.n_bins * len);
        for f in 0..self.n_bins {
            values.extend_from_slice(&self.values[f * self.n_frames + start..][..len]);
        }
        Ok(FeatureMatrix {
            values,
            n_bins: self.n_bins,
            n_frames: len,
            floor_eps: self.floor_eps,
        })
    }
}

/// STFT with the geometry implied by the waveform's sample rate
/// (256/64 samples at 8 kHz, giving 129 bins).
pub fn stft(w: &Waveform) -> Result<ComplexSpectrogram> {
    stft_with(w, StftConfig::for_rate(w.sample_rate()))
}

pub fn stft_with(w: &Waveform, config: StftConfig) -> Result<ComplexSpectrogram> {
    config.validate()?;
    let n = config.frame_len;
    if w.len() < n {
        return Err(Error::Size(format!(
            "waveform of {} samples is shorter than one {n}-sample frame",
            w.len()
        )));
    }
    let n_frames = config.n_frames(w.len());
    let n_bins = config.n_bins();
    let window = hann(n);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut bins = vec![Complex64::new(0.0, 0.0); n_bins * n_frames];
    let x = w.samples();
    for t in 0..n_frames {
        let frame = &x[t * config.hop..][..n];
        for ((b, s), h) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex64::new(s * h, 0.0);
        }
        fft.process(&mut buf);
        for f in 0..n_bins {
            bins[f * n_frames + t] = buf[f];
        }
    }
    Ok(ComplexSpectrogram {
        bins,
        n_bins,
        n_frames,
        config,
        sample_rate: w.sample_rate(),
    })
}

/// Weighted overlap-add inverse: Hann synthesis window, normalized by the
/// summed squared windows. Output spans `(T − 1)·hop + frame_len` samples.
/// Reconstruction is exact wherever the summed window power reaches the
/// floor, i.e. everywhere except the first and last few samples.
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    s.config.validate()?;
    let n = s.config.frame_len;
    if s.n_bins != s.config.n_bins() || s.bins.len() != s.n_bins * s.n_frames {
        return Err(Error::Size("spectrogram geometry is inconsistent".into()));
    }
    let len = s.config.samples_for_frames(s.n_frames);
    let window = hann(n);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut acc = vec![0.0; len];
    let mut wsum = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..s.n_frames {
        for f in 0..s.n_bins {
            buf[f] = s.get(f, t);
        }
        // Hermitian completion of the one-sided spectrum.
        for f in s.n_bins..n {
            buf[f] = buf[n - f].conj();
        }
        // DC and Nyquist of a real frame are real.
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        ifft.process(&mut buf);
        let start = t * s.config.hop;
        for i in 0..n {
            acc[start + i] += buf[i].re / n as f64 * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }
    let floor = WINDOW_POWER_FLOOR * wsum.iter().cloned().fold(0.0, f64::max);
    let samples = acc
        .iter()
        .zip(&wsum)
        .map(|(a, w)| a / w.max(floor))
        .collect();
    Waveform::new(samples, s.sample_rate)
}

pub fn log_magnitude(s: &ComplexSpectrogram, eps: f64) -> Result<FeatureMatrix> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("log floor must be positive, got {eps}")));
    }
    Ok(FeatureMatrix {
        values: s.bins.iter().map(|c| (c.norm() + eps).ln()).collect(),
        n_bins: s.n_bins,
        n_frames: s.n_frames,
        floor_eps: eps,
    })
}

/// Inverse STFT of `mag_est · exp(i·∠mixture)`.
pub fn resynthesize(mag_est: &MagnitudeSpectrogram, mixture: &ComplexSpectrogram) -> Result<Waveform> {
    if mag_est.n_bins != mixture.n_bins || mag_est.n_frames != mixture.n_frames {
        return Err(Error::Size(format!(
            "estimate is {}x{}, mixture is {}x{}",
            mag_est.n_bins, mag_est.n_frames, mixture.n_bins, mixture.n_frames
        )));
    }
    let bins = mag_est
        .values
        .iter()
        .zip(&mixture.bins)
        .map(|(&m, c)| Complex64::from_polar(m, c.arg()))
        .collect();
    istft(&ComplexSpectrogram {
        bins,
        ..mixture.clone()
    })
}

/// Full linear convolution via FFT; output length `a.len() + b.len() − 1`.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut fa: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fa.resize(n, Complex64::new(0.0, 0.0));
    let mut fb: Vec<Complex64> = b.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fb.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa[..out_len].iter().map(|c| c.re / n as f64).collect()
}

/// Writes a grid as CSV: one row per frequency bin, one column per frame.
pub fn write_grid_csv(path: impl AsRef<Path>, values: &[f64], n_bins: usize, n_frames: usize) -> Result<()> {
    if values.len() != n_bins * n_frames {
        return Err(Error::Size("grid dimensions do not match data".into()));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for f in 0..n_bins {
        let row = &values[f * n_frames..][..n_frames];
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

//! Source separation metrics (SDR, SIR, SAR).
//!
//! Each estimate is decomposed by least-squares projection onto delayed
//! copies of the references (up to `filt_len − 1` samples): the projection
//! onto its own reference's delays is the target, the remaining projection
//! onto all references' delays is interference, and the residual is
//! artifacts. Signals are zero-extended by `filt_len − 1` samples so delayed
//! references fit.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::attractor::permutations;
use crate::audio_io::Waveform;
use crate::error::{Error, Result};

pub const DEFAULT_FILT_LEN: usize = 512;
/// Ridge added to the normal equations when they are not positive definite,
/// relative to the matrix trace.
pub const RIDGE: f64 = 1e-10;

/// Components of one estimate relative to one target reference, each of
/// length `N + filt_len − 1`.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
    /// A ridge was needed to solve one of the projections.
    pub regularized: bool,
}

impl Decomposition {
    pub fn sdr(&self) -> f64 {
        let noise: Vec<f64> = self.e_interf.iter().zip(&self.e_artif).map(|(a, b)| a + b).collect();
        db(energy(&self.s_target), energy(&noise))
    }

    pub fn sir(&self) -> f64 {
        db(energy(&self.s_target), energy(&self.e_interf))
    }

    pub fn sar(&self) -> f64 {
        let signal: Vec<f64> = self.s_target.iter().zip(&self.e_interf).map(|(a, b)| a + b).collect();
        db(energy(&signal), energy(&self.e_artif))
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn db(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (num / den).log10()
    }
}

/// Scores per reference, with the estimate assigned to each.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationScore {
    pub sdr_db: Vec<f64>,
    pub sir_db: Vec<f64>,
    pub sar_db: Vec<f64>,
    /// `permutation[j]` is the estimate matched to reference `j`.
    pub permutation: Vec<usize>,
    pub regularized: bool,
}

impl SeparationScore {
    pub fn mean_sdr(&self) -> f64 {
        self.sdr_db.iter().sum::<f64>() / self.sdr_db.len() as f64
    }
}

/// Cholesky factor of a symmetric positive-definite matrix.
struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Fails when a pivot is not comfortably positive.
    fn factor(a: &[f64], n: usize) -> Option<Cholesky> {
        let scale = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
        let tiny = scale * 1e-13;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let row_j = j * n;
            let d = a[row_j + j] - l[row_j..row_j + j].iter().map(|x| x * x).sum::<f64>();
            if !(d > tiny) {
                return None;
            }
            let djj = d.sqrt();
            l[row_j + j] = djj;
            for i in j + 1..n {
                let row_i = i * n;
                let dot: f64 = l[row_i..row_i + j]
                    .iter()
                    .zip(&l[row_j..row_j + j])
                    .map(|(x, y)| x * y)
                    .sum();
                l[row_i + j] = (a[row_i + j] - dot) / djj;
            }
        }
        Some(Cholesky { n, l })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let dot: f64 = self.l[i * n..i * n + i].iter().zip(&y[..i]).map(|(a, b)| a * b).sum();
            y[i] = (y[i] - dot) / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}

/// Factors `a`, adding a trace-relative ridge if it is not positive definite.
fn factor_with_fallback(a: &[f64], n: usize) -> Result<(Cholesky, bool)> {
    if let Some(c) = Cholesky::factor(a, n) {
        return Ok((c, false));
    }
    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
    let lambda = RIDGE * trace;
    log::debug!("normal equations not positive definite; adding ridge {lambda:e}");
    let mut reg = a.to_vec();
    for i in 0..n {
        reg[i * n + i] += lambda;
    }
    Cholesky::factor(&reg, n)
        .map(|c| (c, true))
        .ok_or_else(|| Error::Numerical("normal equations singular even with ridge".into()))
}

/// References prepared for repeated projections: spectra, the Gram matrix of
/// all delayed references, and its factorizations.
pub struct ReferenceSet {
    refs: Vec<Vec<f64>>,
    len: usize,
    filt_len: usize,
    n_fft: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    spectra: Vec<Vec<Complex64>>,
    full: Cholesky,
    own: Vec<Cholesky>,
    regularized: bool,
}

impl ReferenceSet {
    pub fn new(refs: &[Waveform], filt_len: usize) -> Result<ReferenceSet> {
        let first = refs.first().ok_or_else(|| Error::Size("no references".into()))?;
        let len = first.len();
        if refs.iter().any(|r| r.len() != len) {
            return Err(Error::Size("references differ in length".into()));
        }
        if filt_len == 0 || len < filt_len {
            return Err(Error::Size(format!(
                "signals of {len} samples are shorter than the {filt_len}-tap filter"
            )));
        }
        if let Some(j) = refs.iter().position(|r| r.samples().iter().all(|&x| x == 0.0)) {
            return Err(Error::Degenerate(format!("reference {j} is silent")));
        }
        let c = refs.len();
        let n_fft = (len + filt_len - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n_fft);
        let ifft = planner.plan_fft_inverse(n_fft);
        let spectra: Vec<Vec<Complex64>> = refs
            .iter()
            .map(|r| spectrum(&*fft, r.samples(), n_fft))
            .collect();

        // G[(i,a),(j,b)] = Σ_m r_i[m] r_j[m + a − b]
        let n = c * filt_len;
        let mut g = vec![0.0; n * n];
        for i in 0..c {
            for j in i..c {
                let xc = cross_correlation(&*ifft, &spectra[i], &spectra[j], n_fft);
                for a in 0..filt_len {
                    for b in 0..filt_len {
                        let d = a as isize - b as isize;
                        let v = xc[d.rem_euclid(n_fft as isize) as usize];
                        g[(i * filt_len + a) * n + j * filt_len + b] = v;
                        g[(j * filt_len + b) * n + i * filt_len + a] = v;
                    }
                }
            }
        }
        let (full, mut regularized) = factor_with_fallback(&g, n)?;
        let mut own = Vec::with_capacity(c);
        for j in 0..c {
            let mut block = vec![0.0; filt_len * filt_len];
            for a in 0..filt_len {
                let src = (j * filt_len + a) * n + j * filt_len;
                block[a * filt_len..(a + 1) * filt_len].copy_from_slice(&g[src..src + filt_len]);
            }
            let (ch, reg) = factor_with_fallback(&block, filt_len)?;
            regularized |= reg;
            own.push(ch);
        }
        Ok(ReferenceSet {
            refs: refs.iter().map(|r| r.samples().to_vec()).collect(),
            len,
            filt_len,
            n_fft,
            fft,
            ifft,
            spectra,
            full,
            own,
            regularized,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.refs.len()
    }

    /// Decomposes `est` against every reference in turn.
    pub fn decompose(&self, est: &Waveform) -> Result<Vec<Decomposition>> {
        if est.len() != self.len {
            return Err(Error::Size(format!(
                "estimate has {} samples, references {}",
                est.len(),
                self.len
            )));
        }
        let (c, l) = (self.n_sources(), self.filt_len);
        let out_len = self.len + l - 1;
        let est_spec = spectrum(&*self.fft, est.samples(), self.n_fft);
        // D[(i,a)] = Σ_m r_i[m] est[m + a]
        let mut d = vec![0.0; c * l];
        for i in 0..c {
            let xc = cross_correlation(&*self.ifft, &self.spectra[i], &est_spec, self.n_fft);
            d[i * l..(i + 1) * l].copy_from_slice(&xc[..l]);
        }
        let coef_all = self.full.solve(&d);
        let proj_all = self.synthesize(&coef_all, 0..c, out_len);

        let mut est_ext = est.samples().to_vec();
        est_ext.resize(out_len, 0.0);
        let mut out = Vec::with_capacity(c);
        for j in 0..c {
            let coef = self.own[j].solve(&d[j * l..(j + 1) * l]);
            let mut full_coef = vec![0.0; c * l];
            full_coef[j * l..(j + 1) * l].copy_from_slice(&coef);
            let s_target = self.synthesize(&full_coef, j..j + 1, out_len);
            let e_interf: Vec<f64> = proj_all.iter().zip(&s_target).map(|(p, s)| p - s).collect();
            let e_artif: Vec<f64> = est_ext.iter().zip(&proj_all).map(|(e, p)| e - p).collect();
            out.push(Decomposition {
                s_target,
                e_interf,
                e_artif,
                regularized: self.regularized,
            });
        }
        Ok(out)
    }

    /// `Σ_i Σ_a coef[i,a] · r_i[n − a]` for the listed references.
    fn synthesize(&self, coef: &[f64], sources: std::ops::Range<usize>, out_len: usize) -> Vec<f64> {
        let l = self.filt_len;
        let mut acc = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for i in sources {
            let h = spectrum(&*self.fft, &coef[i * l..(i + 1) * l], self.n_fft);
            for ((a, s), hv) in acc.iter_mut().zip(&self.spectra[i]).zip(&h) {
                *a += s * hv;
            }
        }
        self.ifft.process(&mut acc);
        let scale = 1.0 / self.n_fft as f64;
        acc[..out_len].iter().map(|v| v.re * scale).collect()
    }
}

fn spectrum(fft: &dyn Fft<f64>, x: &[f64], n_fft: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(n_fft, Complex64::new(0.0, 0.0));
    fft.process(&mut buf);
    buf
}

/// Circular `Σ_m a[m] b[m + d]` for `d` in `0..n_fft` (negative lags wrap).
fn cross_correlation(ifft: &dyn Fft<f64>, a: &[Complex64], b: &[Complex64], n_fft: usize) -> Vec<f64> {
    let mut buf: Vec<Complex64> = a.iter().zip(b).map(|(x, y)| x.conj() * y).collect();
    ifft.process(&mut buf);
    let scale = 1.0 / n_fft as f64;
    buf.iter().map(|v| v.re * scale).collect()
}

/// Standalone decomposition of one estimate against `refs[target]`.
pub fn project_onto_delays(
    est: &Waveform,
    refs: &[Waveform],
    target: usize,
    filt_len: usize,
) -> Result<Decomposition> {
    if target >= refs.len() {
        return Err(Error::Size(format!("no reference {target}")));
    }
    let set = ReferenceSet::new(refs, filt_len)?;
    Ok(set.decompose(est)?.swap_remove(target))
}

/// Scores every estimate against every reference and reports the
/// assignment with the highest mean SIR.
pub fn bss_eval_sources(ests: &[Waveform], refs: &[Waveform]) -> Result<SeparationScore> {
    bss_eval_sources_with(ests, refs, DEFAULT_FILT_LEN)
}

pub fn bss_eval_sources_with(
    ests: &[Waveform],
    refs: &[Waveform],
    filt_len: usize,
) -> Result<SeparationScore> {
    if ests.len() != refs.len() || refs.is_empty() {
        return Err(Error::Size(format!(
            "{} estimates for {} references",
            ests.len(),
            refs.len()
        )));
    }
    let set = ReferenceSet::new(refs, filt_len)?;
    score_with(&set, ests)
}

/// Scores against a prepared reference set.
pub fn score_with(set: &ReferenceSet, ests: &[Waveform]) -> Result<SeparationScore> {
    let c = set.n_sources();
    if ests.len() != c {
        return Err(Error::Size(format!("{} estimates for {c} references", ests.len())));
    }
    // metrics[e][j]
    let mut metrics = Vec::with_capacity(c);
    for est in ests {
        let decs = set.decompose(est)?;
        metrics.push(
            decs.iter()
                .map(|d| (d.sdr(), d.sir(), d.sar()))
                .collect::<Vec<_>>(),
        );
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(c) {
        let mean_sir = (0..c).map(|j| metrics[perm[j]][j].1).sum::<f64>() / c as f64;
        if best.as_ref().is_none_or(|(b, _)| mean_sir > *b) {
            best = Some((mean_sir, perm));
        }
    }
    let (_, perm) = best.expect("at least one permutation");
    Ok(SeparationScore {
        sdr_db: (0..c).map(|j| metrics[perm[j]][j].0).collect(),
        sir_db: (0..c).map(|j| metrics[perm[j]][j].1).collect(),
        sar_db: (0..c).map(|j| metrics[perm[j]][j].2).collect(),
        permutation: perm,
        regularized: set.regularized,
    })
}

/// Appends rows `example_id,source,sdr_db,sir_db,sar_db,permutation`.
pub fn write_scores_csv<W: std::io::Write>(mut out: W, example_id: &str, score: &SeparationScore) -> Result<()> {
    for j in 0..score.sdr_db.len() {
        writeln!(
            out,
            "{example_id},{j},{:.4},{:.4},{:.4},{}",
            score.sdr_db[j], score.sir_db[j], score.sar_db[j], score.permutation[j]
        )?;
    }
    Ok(())
}

pub const SCORES_CSV_HEADER: &str = "example_id,source,sdr_db,sir_db,sar_db,permutation";

/// Creates a new score file with its header; fails if it already exists.
pub fn create_scores_csv(path: impl AsRef<Path>) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{SCORES_CSV_HEADER}")?;
    Ok(w)
}

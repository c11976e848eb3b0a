//! Oracles and constructions for checking bss_eval.

use dasep_core::audio_io::Waveform;
use dasep_core::bsseval::ReferenceSet;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn wave(x: Vec<f64>) -> Waveform {
    Waveform::new(x, 8000).unwrap()
}

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for k in col..n {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Least-squares projection of `target` onto the columns of the explicit
/// delay matrix of `refs`.
pub fn dense_projection(refs: &[Vec<f64>], target: &[f64], filt: usize) -> Vec<f64> {
    let len = refs[0].len();
    let rows = len + filt - 1;
    let mut cols = Vec::new();
    for r in refs {
        for d in 0..filt {
            let mut c = vec![0.0; rows];
            c[d..d + len].copy_from_slice(r);
            cols.push(c);
        }
    }
    let mut t = target.to_vec();
    t.resize(rows, 0.0);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let g: Vec<Vec<f64>> = cols.iter().map(|a| cols.iter().map(|b| dot(a, b)).collect()).collect();
    let rhs: Vec<f64> = cols.iter().map(|c| dot(c, &t)).collect();
    let coef = dense_solve(g, rhs);
    (0..rows).map(|n| cols.iter().zip(&coef).map(|(c, w)| c[n] * w).sum()).collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `ref + g·n` per reference, where `n` is white noise with its delay-span
/// component removed and `g` sets the energy ratio to `target_db`, so the
/// designed SDR is exactly `target_db`.
pub fn orthogonal_noise_estimates(refs: &[Waveform], filt: usize, target_db: f64, rng: &mut ChaCha8Rng) -> Vec<Waveform> {
    let len = refs[0].len();
    let set = ReferenceSet::new(refs, filt).unwrap();
    refs.iter()
        .map(|r| {
            let n = wave(noise(len, rng));
            let dec = set.decompose(&n).unwrap().swap_remove(0);
            let resid = &dec.e_artif[..len];
            let sig: f64 = r.samples().iter().map(|v| v * v).sum();
            let e: f64 = resid.iter().map(|v| v * v).sum();
            let g = (sig / e / 10f64.powf(target_db / 10.0)).sqrt();
            wave(r.samples().iter().zip(resid).map(|(a, b)| a + g * b).collect())
        })
        .collect()
}

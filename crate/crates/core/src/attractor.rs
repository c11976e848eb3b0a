//! Attractor-based masking: ideal-binary labels, the silence threshold,
//! attractor centroids, masks, source estimates, the training loss, and
//! K-means attractors for inference.

use std::io::Write as _;
use std::path::Path;

use dasep_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{FeatureMatrix, MagnitudeSpectrogram};
use crate::embednet::EmbeddingTensor;
use crate::error::{Error, Result};

/// Per-bin source membership, laid out `[f][t][c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTensor {
    pub values: Vec<u8>,
    pub n_bins: usize,
    pub n_frames: usize,
    pub n_sources: usize,
}

impl LabelTensor {
    pub fn get(&self, f: usize, t: usize, c: usize) -> u8 {
        self.values[(f * self.n_frames + t) * self.n_sources + c]
    }

    /// Index of the active source at bin `i = f·T + t`, if any.
    pub fn owner(&self, i: usize) -> Option<usize> {
        self.values[i * self.n_sources..(i + 1) * self.n_sources]
            .iter()
            .position(|&v| v == 1)
    }

    /// Member count per source.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_sources];
        for row in self.values.chunks(self.n_sources) {
            for (c, &v) in row.iter().enumerate() {
                counts[c] += v as usize;
            }
        }
        counts
    }

    /// Labels as a hard mask; bins with no label get an all-zero row.
    pub fn to_mask(&self) -> MaskTensor {
        MaskTensor {
            values: self.values.iter().map(|&v| v as f64).collect(),
            n_bins: self.n_bins,
            n_frames: self.n_frames,
            n_sources: self.n_sources,
        }
    }
}

/// Ideal binary mask: each bin goes to the source with the largest
/// magnitude, ties to the lowest index.
pub fn ideal_binary_mask(sources: &[MagnitudeSpectrogram]) -> Result<LabelTensor> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Shape("no sources".into()))?;
    if sources.iter().any(|s| !s.same_geometry(first)) {
        return Err(Error::Shape("sources differ in geometry".into()));
    }
    let c = sources.len();
    let n = first.values.len();
    let mut values = vec![0u8; n * c];
    for i in 0..n {
        let mut best = 0;
        for (k, s) in sources.iter().enumerate().skip(1) {
            if s.values[i] > sources[best].values[i] {
                best = k;
            }
        }
        values[i * c + best] = 1;
    }
    Ok(LabelTensor {
        values,
        n_bins: first.n_bins,
        n_frames: first.n_frames,
        n_sources: c,
    })
}

/// Bins carrying enough energy to take part in attractor estimation.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdMask {
    pub values: Vec<bool>,
    pub n_bins: usize,
    pub n_frames: usize,
    pub alpha: f64,
    /// The input was constant, so every bin was kept.
    pub degenerate: bool,
}

impl ThresholdMask {
    pub fn kept(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Keeps bin `(f,t)` iff `X'[f,t] ≥ α·max(X')` where `X' = X − min(X)` is
/// the shifted log-magnitude.
pub fn threshold(x: &FeatureMatrix, alpha: f64) -> Result<ThresholdMask> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let lo = x.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi > lo);
    if degenerate {
        log::warn!("constant feature matrix; keeping every bin");
    }
    let cut = alpha * (hi - lo);
    let values = x
        .values
        .iter()
        .map(|&v| degenerate || v - lo >= cut)
        .collect();
    Ok(ThresholdMask {
        values,
        n_bins: x.n_bins,
        n_frames: x.n_frames,
        alpha,
        degenerate,
    })
}

/// Zeroes the labels of bins removed by `h`.
pub fn masked_labels(raw: &LabelTensor, h: &ThresholdMask) -> Result<LabelTensor> {
    if raw.n_bins != h.n_bins || raw.n_frames != h.n_frames {
        return Err(Error::Shape(format!(
            "labels {}x{} vs threshold {}x{}",
            raw.n_bins, raw.n_frames, h.n_bins, h.n_frames
        )));
    }
    let c = raw.n_sources;
    let values = raw
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| v * h.values[i / c] as u8)
        .collect();
    Ok(LabelTensor {
        values,
        ..raw.clone()
    })
}

/// One centroid per source in embedding space, `C×K`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttractorSet {
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
    pub dim: usize,
}

impl AttractorSet {
    pub fn n_sources(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, c: usize) -> &[f64] {
        &self.values[c * self.dim..(c + 1) * self.dim]
    }
}

/// Mean embedding of each source's labelled bins.
pub fn train_attractors(v: &EmbeddingTensor, y: &LabelTensor) -> Result<AttractorSet> {
    if v.n_bins != y.n_bins || v.n_frames != y.n_frames {
        return Err(Error::Shape("embeddings and labels differ in geometry".into()));
    }
    let (c, k) = (y.n_sources, v.dim);
    let mut values = vec![0.0; c * k];
    let mut counts = vec![0usize; c];
    for i in 0..v.n_bins * v.n_frames {
        let e = &v.values[i * k..(i + 1) * k];
        for s in 0..c {
            if y.values[i * c + s] == 1 {
                counts[s] += 1;
                values[s * k..(s + 1) * k]
                    .iter_mut()
                    .zip(e)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
    for s in 0..c {
        if counts[s] == 0 {
            return Err(Error::DegenerateAttractor(s));
        }
        let inv = 1.0 / counts[s] as f64;
        values[s * k..(s + 1) * k].iter_mut().for_each(|a| *a *= inv);
    }
    Ok(AttractorSet {
        values,
        counts,
        dim: k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            restarts: 10,
            max_iters: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    /// Unit-normalized centroids.
    pub attractors: AttractorSet,
    /// Inertia of the winning restart before renormalization.
    pub inertia: f64,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
    pub assignments: Vec<usize>,
    pub restart: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index on ties) and its squared distance.
fn nearest(p: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// K-means++ seeding followed by Lloyd iterations; the lowest-inertia restart
/// wins (earliest on ties). `points` is row-major `n×dim`.
pub fn kmeans(points: &[f64], dim: usize, c: usize, opts: &KMeansOptions) -> Result<KMeansResult> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Shape("point buffer is not a multiple of dim".into()));
    }
    let n = points.len() / dim;
    if c == 0 || n < c {
        return Err(Error::Clustering(format!("{n} points cannot form {c} clusters")));
    }
    if opts.restarts == 0 {
        return Err(Error::Clustering("at least one restart is required".into()));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..opts.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(r as u64);
        let run = lloyd(points, dim, n, c, opts.max_iters, &mut rng, r);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one restart");
    for cen in best.attractors.values.chunks_mut(dim) {
        let norm = cen.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            cen.iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok(best)
}

fn lloyd(
    points: &[f64],
    dim: usize,
    n: usize,
    c: usize,
    max_iters: usize,
    rng: &mut ChaCha8Rng,
    restart: usize,
) -> KMeansResult {
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    // k-means++ seeding
    let mut centroids = Vec::with_capacity(c * dim);
    centroids.extend_from_slice(point(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centroids[..dim])).collect();
    for _ in 1..c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(point(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &centroids[start..start + dim]));
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    let mut trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for i in 0..n {
            let (j, d) = nearest(point(i), &centroids, dim);
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
            dist[i] = d;
        }
        // Empty clusters are reseeded at the point farthest from its centroid.
        let mut counts = vec![0usize; c];
        assign.iter().for_each(|&j| counts[j] += 1);
        for j in 0..c {
            if counts[j] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("n >= c guarantees a donor cluster");
                counts[assign[far]] -= 1;
                counts[j] = 1;
                assign[far] = j;
                dist[far] = 0.0;
                centroids[j * dim..(j + 1) * dim].copy_from_slice(point(far));
                changed = true;
            }
        }
        trace.push(dist.iter().sum());
        if !changed && trace.len() > 1 {
            break;
        }
        let mut sums = vec![0.0; c * dim];
        for i in 0..n {
            let j = assign[i];
            sums[j * dim..(j + 1) * dim]
                .iter_mut()
                .zip(point(i))
                .for_each(|(s, x)| *s += x);
        }
        for j in 0..c {
            let inv = 1.0 / counts[j] as f64;
            for (dst, s) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..]) {
                *dst = s * inv;
            }
        }
    }
    // Final inertia with the last centroids.
    let inertia: f64 = (0..n)
        .map(|i| sq_dist(point(i), &centroids[assign[i] * dim..(assign[i] + 1) * dim]))
        .sum();
    if trace.last().is_some_and(|&t| inertia < t) {
        trace.push(inertia);
    }
    let mut counts = vec![0usize; c];
    assign.iter().for_each(|&j| counts[j] += 1);
    KMeansResult {
        attractors: AttractorSet {
            values: centroids,
            counts,
            dim,
        },
        inertia,
        inertia_trace: trace,
        assignments: assign,
        restart,
    }
}

/// Clusters the embeddings of the bins kept by `h` into `c` attractors.
pub fn kmeans_attractors(
    v: &EmbeddingTensor,
    h: &ThresholdMask,
    c: usize,
    opts: &KMeansOptions,
) -> Result<KMeansResult> {
    if v.n_bins != h.n_bins || v.n_frames != h.n_frames {
        return Err(Error::Shape("embeddings and threshold differ in geometry".into()));
    }
    let k = v.dim;
    let mut points = Vec::with_capacity(h.kept() * k);
    for (i, &keep) in h.values.iter().enumerate() {
        if keep {
            points.extend_from_slice(&v.values[i * k..(i + 1) * k]);
        }
    }
    kmeans(&points, k, c, opts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Softmax,
    /// One-hot argmax, lowest index on ties.
    Hard,
}

/// Per-bin source weights, laid out `[f][t][c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTensor {
    pub values: Vec<f64>,
    pub n_bins: usize,
    pub n_frames: usize,
    pub n_sources: usize,
}

impl MaskTensor {
    pub fn get(&self, f: usize, t: usize, c: usize) -> f64 {
        self.values[(f * self.n_frames + t) * self.n_sources + c]
    }
}

/// Softmax (or argmax) over sources of the embedding–attractor inner products.
pub fn compute_mask(v: &EmbeddingTensor, a: &AttractorSet, mode: MaskMode) -> Result<MaskTensor> {
    if v.dim != a.dim {
        return Err(Error::Shape(format!(
            "embedding dim {} vs attractor dim {}",
            v.dim, a.dim
        )));
    }
    let (c, k) = (a.n_sources(), v.dim);
    let n = v.n_bins * v.n_frames;
    let mut values = vec![0.0; n * c];
    let mut logits = vec![0.0; c];
    for i in 0..n {
        let e = &v.values[i * k..(i + 1) * k];
        for (s, l) in logits.iter_mut().enumerate() {
            *l = a.get(s).iter().zip(e).map(|(x, y)| x * y).sum();
        }
        let row = &mut values[i * c..(i + 1) * c];
        match mode {
            MaskMode::Softmax => {
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (r, l) in row.iter_mut().zip(&logits) {
                    *r = (l - m).exp();
                    z += *r;
                }
                row.iter_mut().for_each(|r| *r /= z);
            }
            MaskMode::Hard => row[argmax(&logits)] = 1.0,
        }
    }
    Ok(MaskTensor {
        values,
        n_bins: v.n_bins,
        n_frames: v.n_frames,
        n_sources: c,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `Ŝ_c = M_c ⊙ |X|` for every source.
pub fn estimate_sources(m: &MaskTensor, x: &MagnitudeSpectrogram) -> Result<Vec<MagnitudeSpectrogram>> {
    if m.n_bins != x.n_bins || m.n_frames != x.n_frames {
        return Err(Error::Shape("mask and mixture differ in geometry".into()));
    }
    let c = m.n_sources;
    Ok((0..c)
        .map(|s| {
            x.with_values(
                x.values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| m.values[i * c + s] * v)
                    .collect(),
            )
        })
        .collect())
}

/// All orderings of `0..n`, identity first.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// `Σ_c ||S_c − Ŝ_c||²_F` under the best assignment of estimates to sources.
/// Returns the loss and the permutation: estimate `c` is matched with source
/// `perm[c]`.
pub fn training_loss(
    truth: &[MagnitudeSpectrogram],
    est: &[MagnitudeSpectrogram],
) -> Result<(f64, Vec<usize>)> {
    if truth.len() != est.len() || truth.is_empty() {
        return Err(Error::Shape(format!(
            "{} sources vs {} estimates",
            truth.len(),
            est.len()
        )));
    }
    if truth.iter().chain(est).any(|s| !s.same_geometry(&truth[0])) {
        return Err(Error::Shape("spectrogram geometry mismatch".into()));
    }
    let cost = |a: &MagnitudeSpectrogram, b: &MagnitudeSpectrogram| -> f64 {
        a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    Ok(best_permutation(truth.len(), |e, s| cost(&est[e], &truth[s])))
}

/// Minimizes `Σ_c pair_cost(c, perm[c])` over permutations (earliest wins ties).
fn best_permutation(c: usize, pair_cost: impl Fn(usize, usize) -> f64) -> (f64, Vec<usize>) {
    let table: Vec<f64> = (0..c * c).map(|i| pair_cost(i / c, i % c)).collect();
    let mut best = (f64::INFINITY, Vec::new());
    for p in permutations(c) {
        let total: f64 = p.iter().enumerate().map(|(e, &s)| table[e * c + s]).sum();
        if total < best.0 {
            best = (total, p);
        }
    }
    best
}

/// Supervision for one training example: thresholded labels, mixture and
/// source magnitudes, all `F×T`.
#[derive(Clone, Debug)]
pub struct LossTarget {
    pub labels: LabelTensor,
    pub mixture: Vec<f64>,
    pub sources: Vec<Vec<f64>>,
}

/// Records the attractor loss on `tape` for a batch of embeddings
/// `v: [B, K, F, T]`: attractors are label-weighted means of the embeddings,
/// masks the softmax of embedding–attractor products, and the loss the
/// permutation-minimal squared error of the masked mixture magnitudes,
/// averaged over the batch. Returns the loss and the chosen permutations.
pub fn attractor_loss(
    tape: &mut Tape,
    v: Var,
    targets: &[LossTarget],
) -> Result<(Var, Vec<Vec<usize>>)> {
    let shape = tape.shape(v).to_vec();
    let &[b, k, nf, nt] = shape.as_slice() else {
        return Err(Error::Shape(format!("expected [B,K,F,T] embeddings, got {shape:?}")));
    };
    if targets.len() != b {
        return Err(Error::Shape(format!("{} targets for batch of {b}", targets.len())));
    }
    let n = nf * nt;
    let c = targets[0].labels.n_sources;
    let mut y = vec![0.0; b * c * n];
    let mut inv_counts = vec![0.0; b * c * k];
    let mut mix = vec![0.0; b * c * n];
    for (bi, tg) in targets.iter().enumerate() {
        let l = &tg.labels;
        if l.n_bins != nf || l.n_frames != nt || l.n_sources != c {
            return Err(Error::Shape("label geometry does not match embeddings".into()));
        }
        if tg.mixture.len() != n || tg.sources.len() != c || tg.sources.iter().any(|s| s.len() != n) {
            return Err(Error::Shape("target magnitudes do not match embeddings".into()));
        }
        for (s, count) in l.counts().into_iter().enumerate() {
            if count == 0 {
                return Err(Error::DegenerateAttractor(s));
            }
            let base = (bi * c + s) * k;
            inv_counts[base..base + k].fill(1.0 / count as f64);
            for i in 0..n {
                y[(bi * c + s) * n + i] = l.values[i * c + s] as f64;
            }
            mix[(bi * c + s) * n..(bi * c + s + 1) * n].copy_from_slice(&tg.mixture);
        }
    }
    let vf = tape.reshape(v, &[b, k, n])?;
    let yv = tape.constant(Tensor::new(&[b, c, n], y)?);
    let vt = tape.transpose(vf)?;
    let sums = tape.bmm(yv, vt)?;
    let attractors = tape.mul_const(sums, &Tensor::new(&[b, c, k], inv_counts)?)?;
    let logits = tape.bmm(attractors, vf)?;
    let masks = tape.softmax(logits, 1)?;
    let est = tape.mul_const(masks, &Tensor::new(&[b, c, n], mix)?)?;

    let est_v = tape.value(est).data();
    let mut target = vec![0.0; b * c * n];
    let mut perms = Vec::with_capacity(b);
    for (bi, tg) in targets.iter().enumerate() {
        let (_, perm) = best_permutation(c, |e, s| {
            est_v[(bi * c + e) * n..(bi * c + e + 1) * n]
                .iter()
                .zip(&tg.sources[s])
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        });
        for (e, &s) in perm.iter().enumerate() {
            target[(bi * c + e) * n..(bi * c + e + 1) * n].copy_from_slice(&tg.sources[s]);
        }
        perms.push(perm);
    }
    let target = tape.constant(Tensor::new(&[b, c, n], target)?);
    let sq = tape.mse_loss(est, target)?;
    Ok((tape.scale(sq, 1.0 / b as f64), perms))
}

/// Embedding rows `f,t,k0..k{K-1},label` with label −1 for unlabelled bins.
pub fn write_embeddings_csv(
    path: impl AsRef<Path>,
    v: &EmbeddingTensor,
    labels: Option<&LabelTensor>,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..v.dim).map(|k| format!("k{k}")).collect();
    writeln!(out, "f,t,{},label", header.join(","))?;
    for f in 0..v.n_bins {
        for t in 0..v.n_frames {
            let i = f * v.n_frames + t;
            let label = labels
                .and_then(|l| l.owner(i))
                .map_or(-1, |c| c as i64);
            let row: Vec<String> = v.get(f, t).iter().map(|x| format!("{x:.6}")).collect();
            writeln!(out, "{f},{t},{},{label}", row.join(","))?;
        }
    }
    out.flush()?;
    Ok(())
}

//! Network fixtures and a chunked streaming driver.

use dasep_core::dsp::FeatureMatrix;
use dasep_core::embednet::{concat_frames, EmbeddingTensor, Network, NetworkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn features(n_bins: usize, n_frames: usize, rng: &mut impl Rng) -> FeatureMatrix {
    FeatureMatrix {
        values: (0..n_bins * n_frames).map(|_| rng.gen_range(-6.0..2.0)).collect(),
        n_bins,
        n_frames,
        floor_eps: 1e-7,
    }
}

pub fn slice(x: &FeatureMatrix, start: usize, len: usize) -> FeatureMatrix {
    x.frames(start, len).unwrap()
}

/// A small network with non-trivial batch-norm state.
pub fn perturbed_network(cfg: &NetworkConfig, seed: u64) -> Network {
    let mut net = Network::build(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in net.params_mut().iter_mut() {
        if p.name.contains("bn") || p.name.ends_with("bias") {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    for rs in net.running_stats_mut().iter_mut().flatten() {
        rs.mean.iter_mut().for_each(|m| *m = rng.gen_range(-0.5..0.5));
        rs.var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
    }
    net
}

pub fn stream(net: &Network, x: &FeatureMatrix, cuts: &[usize]) -> EmbeddingTensor {
    let mut s = net.streaming();
    let mut parts = Vec::new();
    let mut start = 0;
    for &end in cuts.iter().chain(std::iter::once(&x.n_frames)) {
        if end > start {
            parts.push(s.push(start, &slice(x, start, end - start)).unwrap());
            start = end;
        }
    }
    parts.push(s.finish().unwrap());
    concat_frames(&parts).unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}


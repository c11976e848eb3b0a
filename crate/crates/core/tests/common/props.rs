//! Randomized invariant checks shared by the property tests and the
//! acceptance runner. Each `check_*` runs `cases` proptest cases.

use dasep_core::attractor::{
    compute_mask, ideal_binary_mask, kmeans, masked_labels, threshold, train_attractors, AttractorSet, KMeansOptions,
    MaskMode,
};
use dasep_core::dsp::{FeatureMatrix, MagnitudeSpectrogram, StftConfig};
use dasep_core::embednet::{EmbeddingTensor, Network, NetworkConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestError, TestRunner};

pub type CheckResult = Result<(), TestError<String>>;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn flatten<T: std::fmt::Debug>(r: Result<(), TestError<T>>) -> CheckResult {
    r.map_err(|e| match e {
        TestError::Abort(m) => TestError::Abort(m),
        TestError::Fail(m, v) => TestError::Fail(m, format!("{v:?}")),
    })
}

fn unit_rows(raw: &[f64], dim: usize) -> Vec<f64> {
    let mut out = raw.to_vec();
    for row in out.chunks_mut(dim) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= n);
    }
    out
}

fn embeddings(values: Vec<f64>, n_bins: usize, n_frames: usize, dim: usize) -> EmbeddingTensor {
    EmbeddingTensor {
        values: unit_rows(&values, dim),
        n_bins,
        n_frames,
        dim,
    }
}

fn magnitudes(values: Vec<f64>, n_bins: usize, n_frames: usize) -> MagnitudeSpectrogram {
    MagnitudeSpectrogram {
        values,
        n_bins,
        n_frames,
        config: StftConfig { frame_len: 8, hop: 2 },
        sample_rate: 8000,
    }
}

/// Network embeddings have unit norm at every bin, for random inputs and
/// random small architectures.
pub fn check_unit_norm(cases: u32) -> CheckResult {
    let strategy = (2usize..6, 3usize..10, 1usize..4, 2usize..4, any::<u64>())
        .prop_flat_map(|(f, t, k, ch, seed)| {
            (
                Just((f, t, k, ch, seed)),
                proptest::collection::vec(-20.0f64..5.0, f * t),
            )
        });
    flatten(runner(cases).run(&strategy, |((f, t, k, ch, seed), x)| {
        let cfg = NetworkConfig::dilated(f, ch, &[1, 2], k);
        let mut net = Network::build(&cfg, seed).map_err(|e| TestCaseError::fail(e.to_string()))?;
        // Nonzero biases, as after training; with all-zero biases a bin whose
        // receptive field is fully rectified away embeds to the zero vector.
        for p in net.params_mut().iter_mut() {
            if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
                for (i, b) in p.value.data_mut().iter_mut().enumerate() {
                    *b = 0.05 + 0.01 * ((seed >> (i % 60)) & 15) as f64;
                }
            }
        }
        let feats = FeatureMatrix {
            values: x,
            n_bins: f,
            n_frames: t,
            floor_eps: 1e-7,
        };
        let v = net.forward(&feats).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for e in v.values.chunks(k) {
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12, "norm {}", n);
        }
        Ok(())
    }))
}

fn mask_case() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..5, 1usize..6, 1usize..5, 2usize..4).prop_flat_map(|(f, t, k, c)| {
        (
            Just(f),
            Just(t),
            Just(k),
            Just(c),
            proptest::collection::vec(-1.0f64..1.0, f * t * k),
            proptest::collection::vec(-1.0f64..1.0, c * k),
        )
    })
}

/// Softmax masks are in [0, 1] and sum to one per bin; hard masks are one-hot.
pub fn check_mask_row_sums(cases: u32) -> CheckResult {
    flatten(runner(cases).run(&mask_case(), |(f, t, k, c, v, a)| {
        let v = embeddings(v, f, t, k);
        let a = AttractorSet {
            values: a,
            counts: vec![1; c],
            dim: k,
        };
        for mode in [MaskMode::Softmax, MaskMode::Hard] {
            let m = compute_mask(&v, &a, mode).map_err(|e| TestCaseError::fail(e.to_string()))?;
            for row in m.values.chunks(c) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
                if mode == MaskMode::Hard {
                    prop_assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
                }
            }
        }
        Ok(())
    }))
}

/// The hard mask selects the softmax mask's largest entry.
pub fn check_hard_soft_consistency(cases: u32) -> CheckResult {
    flatten(runner(cases).run(&mask_case(), |(f, t, k, c, v, a)| {
        let v = embeddings(v, f, t, k);
        let a = AttractorSet {
            values: a,
            counts: vec![1; c],
            dim: k,
        };
        let soft = compute_mask(&v, &a, MaskMode::Softmax).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let hard = compute_mask(&v, &a, MaskMode::Hard).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for (s, h) in soft.values.chunks(c).zip(hard.values.chunks(c)) {
            let chosen = h.iter().position(|&x| x == 1.0).unwrap();
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s[chosen] >= max - 1e-15, "hard picked {} of {:?}", chosen, s);
        }
        Ok(())
    }))
}

/// Thresholded labels are one-hot on kept bins (naming the loudest source,
/// lowest index on ties) and all-zero elsewhere.
pub fn check_label_threshold(cases: u32) -> CheckResult {
    let strategy = (1usize..6, 1usize..6, 2usize..4, 0.05f64..0.95).prop_flat_map(|(f, t, c, alpha)| {
        (
            Just((f, t, c, alpha)),
            // Few distinct levels so ties occur.
            proptest::collection::vec(prop_oneof![Just(0.0), Just(0.5), Just(1.0), 0.0f64..2.0], f * t * c),
            proptest::collection::vec(-10.0f64..3.0, f * t),
        )
    });
    flatten(runner(cases).run(&strategy, |((f, t, c, alpha), mags, feats)| {
        let sources: Vec<_> = (0..c)
            .map(|s| magnitudes(mags[s * f * t..(s + 1) * f * t].to_vec(), f, t))
            .collect();
        let x = FeatureMatrix {
            values: feats.clone(),
            n_bins: f,
            n_frames: t,
            floor_eps: 1e-7,
        };
        let raw = ideal_binary_mask(&sources).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let h = threshold(&x, alpha).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let y = masked_labels(&raw, &h).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let lo = feats.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = feats.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for i in 0..f * t {
            let keep = hi == lo || feats[i] - lo >= alpha * (hi - lo);
            prop_assert_eq!(h.values[i], keep);
            let row = &y.values[i * c..(i + 1) * c];
            if keep {
                prop_assert_eq!(row.iter().map(|&v| v as usize).sum::<usize>(), 1);
                let owner = row.iter().position(|&v| v == 1).unwrap();
                let best = (0..c).fold(0, |b, s| if mags[s * f * t + i] > mags[b * f * t + i] { s } else { b });
                prop_assert_eq!(owner, best);
            } else {
                prop_assert!(row.iter().all(|&v| v == 0));
            }
        }
        prop_assert_eq!(y.counts().iter().sum::<usize>(), h.kept());
        Ok(())
    }))
}

/// Each attractor lies in the coordinate-wise hull of its members and
/// inside the unit ball.
pub fn check_convex_hull(cases: u32) -> CheckResult {
    let strategy = (1usize..5, 1usize..6, 1usize..5, 2usize..4).prop_flat_map(|(f, t, k, c)| {
        (
            Just((f, t, k, c)),
            proptest::collection::vec(-1.0f64..1.0, f * t * k),
            proptest::collection::vec(0usize..4, f * t),
        )
    });
    flatten(runner(cases).run(&strategy, |((f, t, k, c), v, owners)| {
        let v = embeddings(v, f, t, k);
        let mut labels = dasep_core::attractor::LabelTensor {
            values: vec![0; f * t * c],
            n_bins: f,
            n_frames: t,
            n_sources: c,
        };
        // Owner value c means "unlabelled".
        for (i, &o) in owners.iter().enumerate() {
            if o < c {
                labels.values[i * c + o] = 1;
            }
        }
        match train_attractors(&v, &labels) {
            Err(dasep_core::Error::DegenerateAttractor(s)) => {
                prop_assert_eq!(labels.counts()[s], 0);
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
            Ok(a) => {
                for s in 0..c {
                    let members: Vec<&[f64]> = (0..f * t)
                        .filter(|&i| labels.values[i * c + s] == 1)
                        .map(|i| &v.values[i * k..(i + 1) * k])
                        .collect();
                    let att = a.get(s);
                    for d in 0..k {
                        let lo = members.iter().map(|m| m[d]).fold(f64::INFINITY, f64::min);
                        let hi = members.iter().map(|m| m[d]).fold(f64::NEG_INFINITY, f64::max);
                        prop_assert!(att[d] >= lo - 1e-12 && att[d] <= hi + 1e-12);
                    }
                    prop_assert!(att.iter().map(|x| x * x).sum::<f64>() <= 1.0 + 1e-12);
                }
            }
        }
        Ok(())
    }))
}

/// Lloyd iterations never increase the inertia of the winning restart.
pub fn check_kmeans_monotone(cases: u32) -> CheckResult {
    let strategy = (2usize..30, 1usize..5, 1usize..4, any::<u64>()).prop_flat_map(|(n, dim, c, seed)| {
        (
            Just((n, dim, c.min(n), seed)),
            proptest::collection::vec(-1.0f64..1.0, n * dim),
        )
    });
    flatten(runner(cases).run(&strategy, |((_, dim, c, seed), points)| {
        let opts = KMeansOptions {
            restarts: 3,
            max_iters: 50,
            seed,
        };
        let r = kmeans(&points, dim, c, &opts).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for w in r.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "trace {:?}", r.inertia_trace);
        }
        prop_assert!(r.inertia <= r.inertia_trace[0] * (1.0 + 1e-12) + 1e-12);
        prop_assert!(r.attractors.counts.iter().all(|&n| n > 0));
        Ok(())
    }))
}

/// Every suite, by name.
pub fn all() -> Vec<(&'static str, fn(u32) -> CheckResult)> {
    vec![
        ("unit-norm embeddings", check_unit_norm),
        ("mask row sums", check_mask_row_sums),
        ("hard/soft argmax consistency", check_hard_soft_consistency),
        ("label one-hot with threshold", check_label_threshold),
        ("attractor convex hull", check_convex_hull),
        ("k-means inertia monotone", check_kmeans_monotone),
    ]
}

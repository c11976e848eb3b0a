//! End-to-end gradient check of the training loss with respect to every
//! network parameter.

use dasep_autodiff::{grad_check, AutodiffError, GradCheckOptions, GradCheckReport, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::data::{draw_example, synthetic_corpus};
use super::train::training_target;
use crate::attractor::attractor_loss;
use crate::embednet::{Mode, Network, NetworkConfig};
use crate::error::{Error, Result};

/// Frames per example in the check; long enough for two dilated layers.
const FRAMES: usize = 12;

/// Builds a small network (two hidden layers, one residual), a two-example
/// batch of short synthetic mixtures, and compares the reverse-mode
/// gradient of the attractor loss against central differences.
pub fn end_to_end_loss_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = RunConfig {
        seed,
        speaker_seconds: 2.0,
        ..RunConfig::default()
    };
    let speakers = synthetic_corpus(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    let mut tries = 0;
    while targets.len() < 2 {
        tries += 1;
        if tries > 100 {
            return Err(Error::Data("no usable example for the gradient check".into()));
        }
        let d = draw_example(&speakers, FRAMES, &cfg, &mut rng)?;
        if let Some((x, t)) = training_target(&d.example.mixture, &d.example.sources, cfg.alpha)? {
            feats.extend(x);
            targets.push(t);
        }
    }
    let n_bins = targets[0].labels.n_bins;
    let features = Tensor::new(&[2, 1, n_bins, FRAMES], feats)?;

    let net_cfg = NetworkConfig::dilated(n_bins, 3, &[1, 2], 4);
    let net = Network::build(&net_cfg, seed)?;
    let inputs: Vec<Tensor> = net.params().iter().map(|p| p.value.clone()).collect();
    let report = grad_check(
        &inputs,
        |tape, vars| {
            let x = tape.constant(features.clone());
            let (v, _) = net
                .forward_tape(tape, vars, x, Mode::Train)
                .map_err(|e| wrap("forward", e))?;
            let (loss, _) = attractor_loss(tape, v, &targets)
                .map_err(|e| wrap("loss", e))?;
            Ok(loss)
        },
        opts,
    )?;
    Ok(report)
}

/// Options suited to the end-to-end loss: its value is large next to many of
/// its partials (roundoff floor), and ReLU kinks or a change of the best
/// permutation can fall inside the finite-difference step (smoothness test).
pub fn end_to_end_options(seed: u64, coords: usize) -> GradCheckOptions {
    GradCheckOptions {
        h: 1e-5,
        max_coords: coords,
        seed,
        roundoff_floor: 1e3,
        smoothness_tol: Some(1e-4),
        ..GradCheckOptions::default()
    }
}

fn wrap(op: &'static str, e: Error) -> AutodiffError {
    match e {
        Error::Autodiff(inner) => inner,
        other => AutodiffError::Invalid {
            op,
            msg: other.to_string(),
        },
    }
}

//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Coordinates to verify across all inputs; every coordinate is checked
    /// when the inputs hold fewer.
    pub max_coords: usize,
    pub seed: u64,
    /// Denominator floor for the relative error, so coordinates whose
    /// gradient is essentially zero are compared absolutely.
    pub abs_floor: f64,
    /// Raises the denominator floor to this multiple of the estimated
    /// roundoff of a central difference, `ε·(|f(x+h)| + |f(x−h)|) / 2h`.
    /// Needed when `f` is large compared to some of its partials. 0 disables.
    pub roundoff_floor: f64,
    /// When set, each coordinate is also differenced with step `h/2`; if the
    /// two estimates disagree by more than this relative amount the function
    /// is not smooth there (a ReLU kink or a switch of a discrete choice
    /// lies within the step) and the coordinate is replaced by another one.
    /// The test involves only the numeric estimates, never the analytic
    /// gradient.
    pub smoothness_tol: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            max_coords: 50,
            seed: 0,
            abs_floor: 1e-8,
            roundoff_floor: 0.0,
            smoothness_tol: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped as non-smooth (only with `smoothness_tol`).
    pub non_smooth: usize,
    /// (input index, flat coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the reverse-mode gradient of the scalar function `f` against
/// central differences `(f(x+h) − f(x−h)) / 2h` at sampled coordinates.
///
/// `f` receives a fresh tape with each input recorded as a variable, in order.
pub fn grad_check<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| AutodiffError::NotScalar(tape.shape(out).to_vec()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, v)| grads.get(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // Visiting order; non-smooth coordinates are replaced by later ones.
    let order: Vec<usize> = if total <= opts.max_coords {
        (0..total).collect()
    } else {
        sample(&mut rng, total, total).into_vec()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        non_smooth: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut central = |input: usize, coord: usize, h: f64| -> Result<(f64, f64)> {
        let orig = inputs[input].data()[coord];
        work[input].data_mut()[coord] = orig + h;
        let plus = eval(&work)?;
        work[input].data_mut()[coord] = orig - h;
        let minus = eval(&work)?;
        work[input].data_mut()[coord] = orig;
        let roundoff = f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * h);
        Ok(((plus - minus) / (2.0 * h), roundoff))
    };
    for flat in order {
        if report.checked == opts.max_coords {
            break;
        }
        let (mut input, mut coord) = (0, flat);
        while coord >= inputs[input].len() {
            coord -= inputs[input].len();
            input += 1;
        }
        let (numeric, roundoff) = central(input, coord, opts.h)?;
        let floor = opts.abs_floor.max(opts.roundoff_floor * roundoff);
        if let Some(tol) = opts.smoothness_tol {
            let (half, half_roundoff) = central(input, coord, opts.h / 2.0)?;
            let scale = numeric.abs().max(half.abs()).max(opts.roundoff_floor * half_roundoff).max(opts.abs_floor);
            if (numeric - half).abs() > tol * scale {
                report.non_smooth += 1;
                continue;
            }
        }
        let a = analytic[input][coord];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((input, coord, a, numeric));
        }
    }
    Ok(report)
}

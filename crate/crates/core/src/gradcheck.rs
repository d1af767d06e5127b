//! Central finite-difference gradient checking.
//!
//! Each checked coordinate is perturbed by ±eps and the loss re-evaluated.
//! If either perturbation changes the ReLU/pooling activation pattern the
//! loss is not differentiable on that interval, and the coordinate is
//! counted as skipped rather than compared.

use rand::RngExt;

use crate::arch::Model;
use crate::layers::Mode;
use crate::seed;
use crate::tensor::{ParamId, Tape, Tensor, Var};
use crate::{Error, Real, Result};

pub type Coord = (ParamId, usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: Option<Coord>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of `loss` against central differences at
/// the given coordinates. `loss` must build the same graph on every call.
pub fn check_params<T, F>(params: &mut [Tensor<T>], loss: F, coords: &[Coord], eps: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<'_, T>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {eps}")));
    }
    let (grads, base) = {
        let mut tape = Tape::with_params(params);
        let l = loss(&mut tape)?;
        let pattern = tape.activation_pattern();
        (tape.backward(l)?.params, pattern)
    };
    let eval = |params: &[Tensor<T>]| -> Result<(f64, _)> {
        let mut tape = Tape::with_params(params);
        let l = loss(&mut tape)?;
        Ok((tape.value(l)?[0].as_f64(), tape.activation_pattern()))
    };

    let mut report = GradCheckReport::default();
    for &(p, i) in coords {
        let orig = params[p.0].data()[i];
        let h = T::from_f64(eps);
        params[p.0].data_mut()[i] = orig + h;
        let (up, pat_up) = eval(params)?;
        params[p.0].data_mut()[i] = orig - h;
        let (down, pat_down) = eval(params)?;
        params[p.0].data_mut()[i] = orig;

        if pat_up != base || pat_down != base {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(grads.get(p)[i].as_f64(), numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((p, i));
        }
    }
    Ok(report)
}

/// Checks `samples` randomly chosen parameters of `model` on one labelled
/// image. Every parameter tensor contributes at least one coordinate so
/// that all layers are exercised; the rest are drawn proportionally to
/// tensor size. The model is switched to eval mode (dropout off).
pub fn grad_check<T: Real>(
    model: &mut Model<T>,
    image: &Tensor<T>,
    label: usize,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {eps}")));
    }
    model.set_mode(Mode::Eval);
    let coords = sample_coords(model.params(), samples, seed);
    let (net, params) = model.split_mut();
    check_params(
        params,
        |tape| {
            let logits = net.logits(tape, image, None)?;
            Ok(tape.softmax_cross_entropy(logits, label)?.0)
        },
        &coords,
        eps,
    )
}

fn sample_coords<T: Real>(params: &[Tensor<T>], samples: usize, seed: u64) -> Vec<Coord> {
    let mut rng = seed::rng(seed);
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut coords: Vec<Coord> = params
        .iter()
        .enumerate()
        .map(|(p, t)| (ParamId(p), rng.random_range(0..t.len())))
        .collect();
    while coords.len() < samples.max(params.len()) {
        let mut k = rng.random_range(0..total);
        let p = params
            .iter()
            .position(|t| {
                if k < t.len() {
                    true
                } else {
                    k -= t.len();
                    false
                }
            })
            .expect("index within total");
        coords.push((ParamId(p), k));
    }
    coords
}

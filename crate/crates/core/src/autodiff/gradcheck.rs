//! Central finite-difference check of tape gradients.

use super::{NodeId, ParamSet, Tape};
use crate::error::{invalid, Error, Result};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Below this magnitude both gradients count as zero and the absolute error
/// is used instead of the relative one.
pub const ABSOLUTE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates checked per parameter; all of them when fewer exist.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            samples_per_param: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_error: f64,
    pub passed: bool,
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<20} {:>8} {:>12} {:>14} {:>14}",
            "parameter", "checked", "max error", "analytic", "numeric"
        )?;
        for p in &self.params {
            writeln!(
                f,
                "{:<20} {:>8} {:>12.3e} {:>14.6e} {:>14.6e}",
                p.name, p.checked, p.max_error, p.analytic_at_worst, p.numeric_at_worst
            )?;
        }
        write!(
            f,
            "max error {:.3e} (tol {:.1e}, eps {:.1e}, seed {}): {}",
            self.max_error,
            self.tol,
            self.eps,
            self.seed,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Error between an analytic and a numeric derivative:
/// `|a - n| / max(|a|, |n|, 1e-10)`, or `|a - n|` when both are below
/// [`ABSOLUTE_FLOOR`].
pub fn derivative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABSOLUTE_FLOOR {
        diff
    } else {
        diff / scale.max(1e-10)
    }
}

fn evaluate<F>(build: &mut F, params: &ParamSet, requires_grad: bool) -> Result<(Tape, NodeId, Vec<NodeId>)>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| tape.leaf(p.value().clone(), requires_grad))
        .collect();
    let loss = build(&mut tape, &ids)?;
    Ok((tape, loss, ids))
}

fn loss_value<F>(build: &mut F, params: &ParamSet) -> Result<f64>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let (tape, loss, _) = evaluate(build, params, false)?;
    tape.value(loss).item()
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences `(L(θ+ε) - L(θ-ε)) / 2ε` on a seeded sample of coordinates.
///
/// `build` receives a fresh tape and one leaf per parameter (in set order)
/// and returns the loss node. It must be deterministic.
pub fn gradient_check<F>(mut build: F, params: &ParamSet, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(opts.eps > 0.0) {
        return Err(invalid!("finite-difference step must be positive, got {}", opts.eps));
    }
    let (tape, loss, ids) = evaluate(&mut build, params, true)?;
    let base = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let again = loss_value(&mut build, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Numerical(format!(
            "loss is not deterministic: {base:e} then {again:e}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, (param, &id)) in params.iter().zip(&ids).enumerate() {
        let analytic = grads.get_or_zeros(&tape, id);
        let n = param.value().len();
        let coords: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = ParamCheck {
            name: param.name().to_string(),
            checked: coords.len(),
            max_error: 0.0,
            worst_index: coords.first().copied().unwrap_or(0),
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for &c in &coords {
            let orig = param.value().data()[c];
            let slot = |w: &mut ParamSet, v: f64| {
                w.iter_mut().nth(pi).expect("index in range").value_mut().data_mut()[c] = v;
            };
            slot(&mut work, orig + opts.eps);
            let plus = loss_value(&mut build, &work)?;
            slot(&mut work, orig - opts.eps);
            let minus = loss_value(&mut build, &work)?;
            slot(&mut work, orig);
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[c];
            let err = derivative_error(a, numeric);
            if err > check.max_error || !err.is_finite() {
                check.max_error = if err.is_finite() { err } else { f64::INFINITY };
                check.worst_index = c;
                check.analytic_at_worst = a;
                check.numeric_at_worst = numeric;
            }
        }
        checks.push(check);
    }
    let max_error = checks.iter().fold(0.0f64, |m, c| m.max(c.max_error));
    Ok(GradCheckReport {
        passed: max_error <= opts.tol,
        params: checks,
        max_error,
        eps: opts.eps,
        tol: opts.tol,
        seed: opts.seed,
    })
}

//! Finite-difference gradient checking.
//!
//! The oracle is the graph's own forward pass evaluated at perturbed inputs —
//! independent of the backward machinery it is checking. Every element of every
//! input is perturbed by `±h` and the central difference
//! `(f(x+h) - f(x-h)) / 2h` is compared against the analytic gradient.

use crate::autodiff::{Tape, TapeError, Var};
use crate::params::{BoundParams, Parameters};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Absolute slack below which tiny gradients are exempt from the relative test.
const ABS_GUARD: f64 = 1e-7;

/// Builds a scalar-valued graph over the given leaves.
pub type GraphFn<'a> =
    dyn for<'g> Fn(&'g Tape, &[Var<'g>]) -> Result<Var<'g>, TapeError> + 'a;

#[derive(Debug, Clone)]
pub struct WorstCase {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<WorstCase>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn eval(inputs: &[Tensor], f: &GraphFn<'_>) -> Result<f64, TapeError> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let root = f(&tape, &vars)?;
    Ok(root.value().scalar_value())
}

/// Checks analytic gradients of `f` w.r.t. every element of `inputs`.
pub fn check_gradients(
    inputs: &[Tensor],
    f: &GraphFn<'_>,
) -> Result<GradCheckReport, TapeError> {
    // Analytic pass: all inputs as differentiable leaves.
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| v.grad()).collect();

    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus, f)? - eval(&minus, f)?) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let diff = (a - numeric).abs();
            let rel = if diff < ABS_GUARD {
                0.0
            } else {
                diff / a.abs().max(numeric.abs()).max(ABS_GUARD)
            };
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst =
                    Some(WorstCase { input: i, element: j, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}

/// Builds a scalar-valued graph over bound parameters.
pub type ParamGraphFn<'a> =
    dyn for<'g> Fn(&'g Tape, &BoundParams<'g, '_>) -> Result<Var<'g>, TapeError> + 'a;

/// Checks analytic gradients of `f` w.r.t. every element of every parameter.
/// Parameter values are restored on return.
pub fn check_param_gradients(
    params: &mut Parameters,
    f: &ParamGraphFn<'_>,
) -> Result<GradCheckReport, TapeError> {
    let eval = |params: &Parameters| -> Result<f64, TapeError> {
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, params);
        Ok(f(&tape, &bound)?.value().scalar_value())
    };

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, params);
        let root = f(&tape, &bound)?;
        tape.backward(root)?;
        bound.collect_grads().into_iter().map(|(_, g)| g).collect()
    };

    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    for (i, &id) in ids.iter().enumerate() {
        for j in 0..params.value(id).len() {
            let orig = params.value(id).data()[j];
            params.value_mut(id).data_mut()[j] = orig + STEP;
            let plus = eval(params)?;
            params.value_mut(id).data_mut()[j] = orig - STEP;
            let minus = eval(params)?;
            params.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let diff = (a - numeric).abs();
            let rel = if diff < ABS_GUARD {
                0.0
            } else {
                diff / a.abs().max(numeric.abs()).max(ABS_GUARD)
            };
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(WorstCase { input: i, element: j, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}

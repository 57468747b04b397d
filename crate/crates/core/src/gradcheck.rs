//! Central finite differences against tape gradients.
//!
//! The difference quotients here only ever call the forward closure; they
//! never read the tape's backward machinery, so they serve as an
//! independent oracle for [`Tape::backward`].

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor for gradients near zero.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error over all coordinates of the two gradients.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of a scalar function of several tensors.
pub fn numeric_grads(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64, step: f64) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].numel()];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + step;
            let plus = f(&work);
            work[t].data_mut()[k] = orig - step;
            let minus = f(&work);
            work[t].data_mut()[k] = orig;
            *gk = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Compares tape gradients with central differences for a function built by
/// `build`, which receives one differentiable leaf per input and returns the
/// scalar output. Returns the worst relative error across all inputs.
pub fn check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).expect("scalar output");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], Tensor::into_data))
        .collect();

    let forward = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<_> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.scalar(out)
    };
    let numeric = numeric_grads(inputs, &forward, FD_STEP);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Compares parameter gradients from the tape with central differences on
/// the stored values. `build` must bind parameters via [`Tape::param`] and
/// return a scalar. Returns the worst relative error over `ids`.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], build: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store);
    tape.backward(out).expect("scalar output");
    let grads: std::collections::HashMap<_, _> = tape.param_grads().into_iter().collect();

    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for &id in ids {
        let analytic = grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| vec![0.0; store.value(id).numel()]);
        for (k, &a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = orig + FD_STEP;
            let plus = eval(&work, &build);
            work.value_mut(id).data_mut()[k] = orig - FD_STEP;
            let minus = eval(&work, &build);
            work.value_mut(id).data_mut()[k] = orig;
            worst = worst.max(rel_error(a, (plus - minus) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn eval<F>(store: &ParamStore, build: &F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store);
    tape.scalar(out)
}

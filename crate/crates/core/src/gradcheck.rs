//! Central finite-difference verification of tape gradients.

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Compares the analytic gradient of scalar `f` at `x` with central
/// differences and returns the worst coordinate's
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// Multi-input form of [`grad_check`]; every input is differentiated.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).shape() != [1, 1] {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let orig = input.data()[idx];
            work[k].data_mut()[idx] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[idx] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k].data()[idx];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

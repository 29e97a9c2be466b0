use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

/// Denominator floor for [`relative_error`], so that entries whose true
/// gradient is (near) zero are compared on an absolute scale instead of
/// amplifying finite-difference rounding noise.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of `f` against central differences and returns the
/// worst relative error over all parameter entries.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = |ps: &[Tensor]| -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        Ok(vars.iter().map(|&v| grads.get(v)).collect())
    };
    let value = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss)
            .item()
            .ok_or_else(|| Error::Contract("grad_check function must return a scalar".into()))
    };
    grad_check_with(analytic, value, params, h)
}

/// Lower-level form taking the analytic gradient and the function value as
/// separate closures.
pub fn grad_check_with<A, V>(analytic: A, value: V, params: &[Tensor], h: f64) -> Result<f64>
where
    A: Fn(&[Tensor]) -> Result<Vec<Tensor>>,
    V: Fn(&[Tensor]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Input(format!("finite-difference step must be positive, got {h}")));
    }
    let grads = analytic(params)?;
    if grads.len() != params.len() {
        return Err(Error::Contract("one gradient per parameter required".into()));
    }
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, grad) in grads.iter().enumerate() {
        for j in 0..work[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let plus = value(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let minus = value(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
    }
    Ok(worst)
}

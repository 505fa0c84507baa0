//! Central finite-difference checks for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Denominator floor for the relative error so that near-zero gradients are
/// judged by absolute error instead of amplifying round-off.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::contract("grad_check needs a scalar function"));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    Ok(y)
}

/// Analytic gradients of `f` with respect to each input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.leaf(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Compares `analytic` against central differences of `f` and returns the
/// worst element-wise relative error.
pub fn grad_check_with<F>(f: F, inputs: &[Tensor], analytic: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&f, &work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&f, &work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Worst relative error between tape gradients and central differences
/// `(f(x+eps) - f(x-eps)) / 2eps`, over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    grad_check_with(f, inputs, &analytic, eps)
}

/// Same check for a loss built from parameters in a store. Only the listed
/// parameters are perturbed; `stride` > 1 samples every `stride`-th element.
pub fn grad_check_params<F>(f: F, store: &mut ParamStore, ids: &[ParamId], eps: f64, stride: usize) -> Result<f64>
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var>,
{
    let value = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        let y = tape.value(out).data()[0];
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        Ok(y)
    };
    let analytic = {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        tape.backward(out)?
    };
    let mut worst: f64 = 0.0;
    for &id in ids {
        let n = store.get(id).len();
        let grad = analytic.param(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for i in (0..n).step_by(stride.max(1)) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = value(store)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = value(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad[i], numeric));
        }
    }
    Ok(worst)
}

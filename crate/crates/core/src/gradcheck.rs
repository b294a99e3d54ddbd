//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

fn evaluate<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_output(&g, out)
}

fn scalar_output(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("function output must be scalar, got shape {:?}", v.shape()),
        ));
    }
    Ok(v.data()[0])
}

/// Analytic gradients of a scalar function of several tensors.
pub fn analytic_grads<F>(f: &F, xs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = scalar_output(&g, out)?;
    g.backward(out)?;
    Ok((value, vars.iter().map(|&v| g.grad_or_zeros(v)).collect()))
}

/// Max over every coordinate of every input of
/// `|analytic − central| / max(1, |analytic|)`.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_diff_check", "eps must be positive"));
    }
    let (_, grads) = analytic_grads(&f, xs)?;
    let mut probe: Vec<Tensor> = xs.to_vec();
    let mut worst = 0.0f64;
    for (ti, grad) in grads.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = xs[ti].data()[j];
            probe[ti].data_mut()[j] = orig + eps;
            let plus = evaluate(&f, &probe)?;
            probe[ti].data_mut()[j] = orig - eps;
            let minus = evaluate(&f, &probe)?;
            probe[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grad.data()[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

//! Central finite-difference gradient checking in `f64`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Max over components of `|analytic − numeric| / (|analytic| + 1e-8)` for a
/// scalar-valued computation `f` of `x`, using central differences of step `h`.
pub fn check_gradient<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, x)?;
    let numeric = numeric_gradient(&f, x, h)?;
    Ok(max_relative_error(&analytic, &numeric))
}

pub fn analytic_gradient<F>(f: &F, x: &Tensor<f64>) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    let xv = g.input(x.clone());
    let out = f(&mut g, xv)?;
    let mut scratch = ParamStore::new();
    let grads = g.backward(out, &mut scratch)?;
    Ok(grads
        .get(xv)
        .map(|t| t.into_data())
        .unwrap_or_else(|| vec![0.0; x.len()]))
}

pub fn numeric_gradient<F>(f: &F, x: &Tensor<f64>, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::no_grad();
        let xv = g.input(t);
        let out = f(&mut g, xv)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Invalid(format!("gradient check needs a scalar, got {:?}", v.shape())));
        }
        Ok(v.item())
    };
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let step = plus.data()[i] - minus.data()[i];
        out.push((eval(plus)? - eval(minus)?) / step);
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max)
}

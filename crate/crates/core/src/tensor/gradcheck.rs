//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, Tensor, TensorError, Var};

/// Outcome of [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest `|a - n| / max(|a|, |n|, 1e-3)` over all elements.
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares the gradient of scalar `f` at `point` against central differences.
///
/// `f` is rebuilt on a fresh graph for every probe, in `f64`.
pub fn grad_check<F, E>(f: F, point: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport, E>
where
    F: for<'g> Fn(Var<'g, f64>) -> Result<Var<'g, f64>, E>,
    E: From<TensorError>,
{
    let eval = |x: Tensor<f64>| -> Result<f64, E> {
        let g = Graph::new();
        let v = g.constant(x);
        Ok(f(v)?.item()?)
    };
    let g = Graph::new();
    let x = g.param(point.clone());
    let y = f(x)?;
    let analytic = g.backward(y)?.get(x)?.to_f64_vec();


    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let d = (eval(plus)? - eval(minus)?) / (2.0 * step);
        if !d.is_finite() {
            return Err(TensorError::NonFiniteProbe { index: i }.into());
        }
        numeric.push(d);
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max);
    Ok(GradCheckReport { analytic, numeric, max_rel_error, passed: max_rel_error <= tol })
}

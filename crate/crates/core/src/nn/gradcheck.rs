//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    g.value(out).item()
}

/// Maximum relative error between the analytic gradient of the scalar
/// function `f` at `x` and central differences with the given step, over
/// every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_indices(f, x, step, &all)
}

/// As [`grad_check`], restricted to the listed elements of `x`.
pub fn grad_check_indices<F>(f: F, x: &Tensor, step: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    if g.value(out).len() != 1 {
        return Err(Error::shape(format!(
            "grad_check needs a scalar function, output shape {:?}",
            g.shape(out)
        )));
    }
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

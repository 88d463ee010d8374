//! Central finite-difference gradient checking.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compares analytic gradients of a scalar function against central
/// differences.
///
/// `f` builds the function on a fresh graph from one variable per entry of
/// `inputs`. Returns the maximum over all input coordinates of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        bail!(Config, "finite-difference step {} outside [1e-7, 1e-3]", h);
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        bail!(Dimension, "grad_check needs a scalar-valued function");
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).expect("leaf grad").to_vec()).collect();

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            bail!(Numeric, "function value is not finite");
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (ti, grad) in analytic.iter().enumerate() {
        for ci in 0..grad.len() {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad[ci];
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

//! Central-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Error measure used by the checker: `|analytic − numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Maximum relative error between the analytic gradient of a scalar
/// function of one tensor and its central-difference estimate.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(
        |g: &mut Graph, vars: &[Var]| f(g, vars[0]),
        std::slice::from_ref(point),
        step,
    )
}

/// Like [`grad_check`] for a function of several tensors; every coordinate
/// of every input is perturbed.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Usage("grad_check needs a scalar-valued function".into()));
    }
    let grads = g.backward(out)?;

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(points[k].shape());
        let analytic = grads.get(*v).unwrap_or(&zeros);
        for i in 0..points[k].len() {
            let x0 = points[k].data()[i];
            work[k].data_mut()[i] = x0 + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = x0 - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

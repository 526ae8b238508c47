//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates forward passes, so it is independent of
//! every backward kernel it checks.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Per-input comparison of analytic and numerical gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// `||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2)`, per input.
    pub rel_err: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Check `f`, which must build a scalar from the given inputs, at step `h`.
/// Every input is treated as trainable.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out)
            .item()
            .ok_or_else(|| TensorError::NotScalar(g.value(out).shape().to_vec()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, an) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            let a = an.data()[i];
            diff2 += (a - num) * (a - num);
            an2 += a * a;
            nu2 += num * num;
        }
        let denom = an2.sqrt().max(nu2.sqrt());
        rel_err.push(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom });
    }
    Ok(GradReport { rel_err })
}

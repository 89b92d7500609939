//! Central finite-difference check of tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` for each input.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
}

fn eval(f: &impl Fn(&Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&g, &vars)?;
    let v = g.value(root).item()?;
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h`. Inputs whose gradients are both tiny count as exact.
pub fn gradcheck(
    f: impl Fn(&Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    h: f64,
) -> Result<GradcheckReport> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&g, &vars)?;
    let grads = g.backprop(root)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut perturbed = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut numeric = Tensor::zeros(inputs[which].shape());
        for k in 0..inputs[which].len() {
            let x0 = inputs[which].data()[k];
            perturbed[which].data_mut()[k] = x0 + h;
            let up = eval(&f, &perturbed)?;
            perturbed[which].data_mut()[k] = x0 - h;
            let down = eval(&f, &perturbed)?;
            perturbed[which].data_mut()[k] = x0;
            numeric.data_mut()[k] = (up - down) / (2.0 * h);
        }
        let diff = analytic.sub(&numeric)?.frobenius_norm();
        let scale = analytic.frobenius_norm().max(numeric.frobenius_norm());
        rel_errors.push(if scale < 1e-12 { diff } else { diff / scale });
    }
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradcheckReport { rel_errors, max_rel_error })
}

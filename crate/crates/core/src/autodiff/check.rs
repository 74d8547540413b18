use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error used by every gradient check:
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// Compares reverse-mode gradients of a scalar function of one tensor
/// against central differences and returns the worst relative error.
pub fn numeric_grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let errs = check_gradients(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}

/// Multi-input version of [`numeric_grad_check`]: one worst-case relative
/// error per input tensor.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut worst = vec![0.0; inputs.len()];
    let mut work = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let orig = input.data()[k];
            work[which].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[which].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[which].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[which].data()[k], numeric);
            worst[which] = f64::max(worst[which], err);
        }
    }
    Ok(worst)
}

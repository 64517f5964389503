use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compare reverse-mode gradients of a scalar-valued `f` against central
/// differences, all in `f64`.
///
/// Returns `max |analytic - numeric| / max(1, |numeric|)` over every
/// coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(NumError::invalid(
                "grad_check",
                format!("function must return one element, got {:?}", v.shape()),
            ));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(NumError::NonFinite(format!("grad_check forward value {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(NumError::NonFinite("grad_check forward value".into()));
    }
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every input is a parameter");
        for j in 0..inputs[which].numel() {
            let orig = inputs[which].data()[j];
            work[which].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[which].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[which].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

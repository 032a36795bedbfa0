use super::{AutodiffError, Graph, Result, Tensor, Var};

/// Evaluates `f` on fresh tracked inputs and returns its scalar value and the
/// gradient with respect to each input.
pub fn value_and_grad<F>(f: F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(AutodiffError::InvalidShape {
            shape: g.shape(out).to_vec(),
            reason: "value_and_grad needs a single-element output".into(),
        });
    }
    g.backward(out)?;
    let grads = vars.iter().map(|&v| g.grad(v)).collect::<Result<Vec<_>>>()?;
    Ok((g.scalar(out), grads))
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.scalar(out))
}

/// Compares analytic gradients of the scalar function `f` against central
/// finite differences, one component at a time.
///
/// Returns the largest relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::BadEpsilon(eps));
    }
    let (_, analytic) = value_and_grad(&f, inputs)?;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + eps;
            let plus = eval(&f, &probe).map_err(|_| AutodiffError::NonFiniteProbe { input: i, index: j })?;
            probe[i].data_mut()[j] = x0 - eps;
            let minus = eval(&f, &probe).map_err(|_| AutodiffError::NonFiniteProbe { input: i, index: j })?;
            probe[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

//! Central finite-difference checks for analytic gradients.

use super::{Gradients, Graph, ParamSet, Result, Tensor, Var};

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max over coordinates of `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`
/// for a scalar function of one tensor input.
pub fn grad_check<Fun>(f: Fun, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let params = ParamSet::new();
    let mut grads = Gradients::zeros_like(&params);
    let mut g = Graph::new(&params);
    let xv = g.leaf(x.clone());
    let y = f(&mut g, xv)?;
    g.backward(y, &mut grads)?;
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new(&params);
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        Ok(g.scalar(y))
    };
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_error(a, numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Finite-difference check of every parameter tensor.
///
/// `loss(params, Some(grads))` must evaluate the loss and add its gradient
/// into `grads`; `loss(params, None)` only evaluates.
pub fn param_grad_check<L, E>(params: &ParamSet<f64>, loss: L, eps: f64) -> std::result::Result<Vec<ParamCheck>, E>
where
    L: Fn(&ParamSet<f64>, Option<&mut Gradients<f64>>) -> std::result::Result<f64, E>,
{
    let mut grads = Gradients::zeros_like(params);
    loss(params, Some(&mut grads))?;
    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for id in params.ids() {
        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: 0,
        };
        for i in 0..params.get(id).numel() {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let up = loss(&work, None)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let down = loss(&work, None)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(id)[i];
            check.max_rel_error = check.max_rel_error.max(rel_error(analytic, numeric));
            check.max_abs_error = check.max_abs_error.max((analytic - numeric).abs());
            check.checked += 1;
        }
        report.push(check);
    }
    Ok(report)
}

//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it stays independent
//! of the backward rules it is checking.

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::Parameters;
use crate::numerics::tensor::Tensor;

/// Relative-error tolerance for analytic vs numeric gradients.
pub const GRAD_TOL: f64 = 1e-4;

/// Gradient norms below this are compared in absolute terms.
const NORM_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub rel_err: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
    pub checked_values: usize,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

fn step_for(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

fn set_value<P: Parameters>(params: &mut P, tensor: usize, elem: usize, value: f64) {
    let mut i = 0;
    params.visit_mut(&mut |_, t| {
        if i == tensor {
            t.data_mut()[elem] = value;
        }
        i += 1;
    });
}

/// Compares backward against central differences for every `requires_grad`
/// tensor of `params`. Error per tensor is `‖a − n‖ / max(‖a‖, ‖n‖, 1e-7)`.
pub fn check_gradients<P, F>(params: &P, f: F) -> Result<GradReport>
where
    P: Parameters + Clone,
    F: for<'a> Fn(&mut Graph<'a>, &'a P) -> Result<Var>,
{
    let analytic = {
        let p = params.clone();
        p.zero_grad();
        let mut g = Graph::new();
        let loss = f(&mut g, &p)?;
        g.backward(loss)?;
        let mut grads = Vec::new();
        p.visit(&mut |name, t| grads.push((name, t.requires_grad(), t.grad(), t.data().to_vec())));
        grads
    };

    let eval = |p: &P| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, p)?;
        Ok(g.item(v))
    };

    let mut work = params.clone();
    let mut report = GradReport::default();
    for (ti, (name, requires, grad, values)) in analytic.into_iter().enumerate() {
        if !requires {
            continue;
        }
        let grad = grad.unwrap_or_else(|| vec![0.0; values.len()]);
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut num2 = 0.0;
        for (j, &x) in values.iter().enumerate() {
            let h = step_for(x);
            set_value(&mut work, ti, j, x + h);
            let up = eval(&work)?;
            set_value(&mut work, ti, j, x - h);
            let down = eval(&work)?;
            set_value(&mut work, ti, j, x);
            let numeric = (up - down) / (2.0 * h);
            diff2 += (grad[j] - numeric).powi(2);
            an2 += grad[j] * grad[j];
            num2 += numeric * numeric;
        }
        report.checked_values += values.len();
        let denom = an2.sqrt().max(num2.sqrt()).max(NORM_FLOOR);
        report.tensors.push(TensorCheck { name, rel_err: diff2.sqrt() / denom, analytic_norm: an2.sqrt() });
    }
    Ok(report)
}

/// Convenience wrapper over a plain list of tensors, all differentiated.
pub fn check_fn<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    let params: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    check_gradients(&params, |g, p: &Vec<Tensor>| {
        let vars: Vec<Var> = p.iter().map(|t| g.param(t)).collect();
        f(g, &vars)
    })
}

//! Central finite-difference checks of reverse-mode gradients (f64 only).

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, 1e-8)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Maximum relative error between the tape gradient of `f` at `x` and central
/// differences with step `eps`.
///
/// `f` receives a fresh tape and the input variable and returns a scalar.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    let run = |input: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(input.clone());
        let out = f(&mut g, v);
        eval_scalar(&g, out)
    };

    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let out = f(&mut g, xv);
    let first = eval_scalar(&g, out)?;
    let second = run(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministicFunction { first, second });
    }
    let grads = g.backward(out)?;
    let zeros = Tensor::zeros(x.shape());
    let analytic = grads.wrt(xv).unwrap_or(&zeros);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = run(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = run(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`grad_check_params`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Checks parameter gradients of `f` against central differences.
///
/// At most `max_per_param` evenly spaced coordinates of each parameter are
/// perturbed (`None` checks all of them). Errors are measured with
/// [`relative_error_floor`].
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    eps: f64,
    floor: f64,
    max_per_param: Option<usize>,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
{
    let run = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s);
        eval_scalar(&g, out)
    };

    let mut g = Graph::new();
    let out = f(&mut g, store);
    let first = eval_scalar(&g, out)?;
    let second = run(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministicFunction { first, second });
    }
    let grads = g.backward(out)?.into_param_grads(store);

    let mut probe = store.clone();
    let mut report = Vec::new();
    for id in store.ids().collect::<Vec<ParamId>>() {
        let n = store.get(id).len();
        let stride = match max_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let mut worst = 0.0f64;
        let mut checked = 0;
        for i in (0..n).step_by(stride) {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = run(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = run(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error_floor(grads.get(id).data()[i], numeric, floor));
            checked += 1;
        }
        report.push(ParamCheck {
            name: store.name(id).to_string(),
            checked,
            max_rel_error: worst,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_exact() {
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let err = grad_check(
            |g, v| {
                let s = g.scale(v, 3.0);
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}

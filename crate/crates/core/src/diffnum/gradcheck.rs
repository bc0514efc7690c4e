//! Central finite-difference gradient checking.

use super::{Graph, Mode, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a check: the worst relative error and where it occurred.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative error with an absolute floor: structurally zero gradients (a
/// bias under softmax shift invariance) meet central-difference roundoff of
/// ~1e-11, which must not read as a 100 % error.
const REL_FLOOR: f64 = 1e-6;

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(REL_FLOOR)
}

/// Width of the representable interval `[x − eps, x + eps]`.
fn applied_step(x: f64, eps: f64) -> f64 {
    (x + eps) - (x - eps)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite objective {v} at {what}")))
    }
}

/// Checks `∂f/∂x` for a graph function of one input tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    Ok(grad_check_masked(f, x, eps, |_| false)?.max_relative_error)
}

/// As [`grad_check`], skipping coordinates for which `exclude(i)` holds
/// (non-differentiable points).
pub fn grad_check_masked<F, E>(f: F, x: &Tensor<f64>, eps: f64, exclude: E) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
    E: Fn(usize) -> bool,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::detached(Mode::Eval);
        let xv = g.input(t.clone());
        let y = f(&mut g, xv)?;
        Ok(g.scalar(y))
    };
    let mut g = Graph::detached(Mode::Eval);
    let xv = g.input_grad(x.clone());
    let y = f(&mut g, xv)?;
    finite(g.scalar(y), "x")?;
    let back = g.backward(y)?;
    let analytic = back.wrt(xv).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
    let mut out = GradCheck {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        if exclude(i) {
            continue;
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = finite(eval(&probe)?, "x + eps")?;
        probe.data_mut()[i] = orig - eps;
        let fm = finite(eval(&probe)?, "x - eps")?;
        probe.data_mut()[i] = orig;
        let num = (fp - fm) / applied_step(orig, eps);
        let e = rel(analytic[i], num);
        out.checked += 1;
        if e > out.max_relative_error {
            out.max_relative_error = e;
            out.worst = Some(("x".into(), i));
        }
    }
    Ok(out)
}

/// Checks the gradient of a scalar graph objective with respect to every
/// trainable parameter in `store`. The objective is rebuilt with the same
/// graph seed for every evaluation, so stochastic layers see identical masks.
pub fn grad_check_params<F>(store: &ParamStore<f64>, mode: Mode, f: F, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    const SEED: u64 = 0x5eed;
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s, mode, SEED);
        let y = f(&mut g)?;
        Ok(g.scalar(y))
    };
    let mut g = Graph::new(store, mode, SEED);
    let y = f(&mut g)?;
    finite(g.scalar(y), "parameters")?;
    let back = g.backward(y)?;
    let mut out = GradCheck {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = store.clone();
    for id in store.trainable_ids() {
        let analytic = back.params.get(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        for i in 0..store.get(id).len() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let fp = finite(eval(&probe)?, store.name(id))?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let fm = finite(eval(&probe)?, store.name(id))?;
            probe.get_mut(id).data_mut()[i] = orig;
            let num = (fp - fm) / applied_step(orig, eps);
            let e = rel(analytic[i], num);
            out.checked += 1;
            if e > out.max_relative_error {
                out.max_relative_error = e;
                out.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let sum = |g: &mut Graph<'_, f64>, x: Var| Ok(g.sum(x));
        let z = Tensor::zeros(&[5]);
        assert!(grad_check(sum, &z, 1e-5).unwrap() < 1e-12);
        // elsewhere only the rounding of the objective itself remains
        let x = Tensor::new(&[5], vec![0.3, -1.0, 2.0, 4.5, -0.01]).unwrap();
        assert!(grad_check(sum, &x, 1e-5).unwrap() < 1e-9);
    }

    #[test]
    fn non_finite_objective_is_numeric_error() {
        let x = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let l = g.ln(x);
                Ok(g.sum(l))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn elu_kink_is_excludable() {
        let x = Tensor::new(&[3], vec![0.0, 0.7, -0.4]).unwrap();
        let r = grad_check_masked(
            |g, x| {
                let y = g.elu(x);
                Ok(g.sum(y))
            },
            &x,
            1e-5,
            |i| x.data()[i] == 0.0,
        )
        .unwrap();
        assert_eq!(r.checked, 2);
        assert!(r.max_relative_error < 1e-8);
    }
}

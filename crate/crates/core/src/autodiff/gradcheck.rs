//! Central-difference gradient checking.
//!
//! The analytic gradient comes from [`Tape::backward`]; the numeric one from
//! `(f(x + eps) - f(x - eps)) / 2 eps`, one element at a time. Relative error
//! is `|a - n| / max(|a|, |n|, 1e-8)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::param::ParamStore;
use crate::autodiff::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Position of one checked gradient element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradIndex {
    /// Which input (or parameter) tensor.
    pub input: usize,
    /// Flat element index within it.
    pub element: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Element with the largest relative error.
    pub worst: Option<GradIndex>,
    /// Set when `max_rel_error` exceeds the tolerance.
    pub failing_index: Option<GradIndex>,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

impl GradCheckReport {
    /// Worst-of merge, used to summarise several seeds.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let checked = self.checked + other.checked;
        let mut worse = if other.max_rel_error > self.max_rel_error { other } else { self };
        worse.checked = checked;
        worse
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Scalar-valued function of tape inputs.
pub trait ScalarFn: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> ScalarFn for F {}

fn evaluate(inputs: &[Tensor<f64>], f: &impl ScalarFn) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

pub fn analytic_gradient(inputs: &[Tensor<f64>], f: &impl ScalarFn) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect())
}

pub fn numeric_gradient(inputs: &[Tensor<f64>], f: &impl ScalarFn, eps: f64) -> Result<Vec<Tensor<f64>>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = evaluate(&work, f)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = evaluate(&work, f)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>], tolerance: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut checked = 0;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.shape(), n.shape());
        for (j, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let err = relative_error(av, nv);
            checked += 1;
            if worst.is_none() || err > max_rel_error {
                max_rel_error = err;
                worst = Some(GradIndex { input: i, element: j });
            }
        }
    }
    let passed = max_rel_error < tolerance;
    GradCheckReport {
        max_rel_error,
        worst,
        failing_index: if passed { None } else { worst },
        tolerance,
        checked,
        passed,
    }
}

/// Checks the gradient of `f` with respect to every input tensor.
pub fn grad_check(inputs: &[Tensor<f64>], f: impl ScalarFn, eps: f64, tolerance: f64) -> Result<GradCheckReport> {
    let analytic = analytic_gradient(inputs, &f)?;
    let numeric = numeric_gradient(inputs, &f, eps)?;
    Ok(compare(&analytic, &numeric, tolerance))
}

/// Checks the gradient of a loss with respect to every parameter of `store`.
/// `f` must record the parameters on the tape with [`Tape::param`].
pub fn grad_check_params(
    store: &ParamStore<f64>,
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    eps: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    let grads = tape.backward(loss)?;
    tape.accumulate_param_grads(&grads, &mut work);
    let analytic: Vec<Tensor<f64>> = work.iter().map(|p| p.grad.clone()).collect();

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s)?;
        Ok(tape.value(loss).item())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for id in store.ids().collect::<Vec<_>>() {
        let mut g = Tensor::zeros(store.value(id).shape());
        for j in 0..g.len() {
            let orig = work.get(id).value.data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        numeric.push(g);
    }
    Ok(compare(&analytic, &numeric, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::from_f64(&[1, 4], &[0.3, -1.2, 2.0, 0.7]).unwrap();
        let report = grad_check(
            &[x],
            |tape, v| {
                let gt = tape.constant(Tensor::from_f64(&[1, 4], &[0.1, 0.2, 0.3, 0.4])?);
                let sq = ops::l2_keypoint_loss(tape, v[0], gt)?;
                let lin = ops::dot_const(tape, v[0], vec![1.0, 2.0, 3.0, 4.0]);
                ops::weighted_sum(tape, &[(sq, 1.0), (lin, 0.5)])
            },
            DEFAULT_EPS,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 0.1).abs() < 1e-12);
    }
}

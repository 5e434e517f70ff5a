//! Analytic-vs-numeric gradient comparison.

use crate::autograd::{Tape, Var};
use crate::error::{param_err, Error, Result};
use crate::oracle::finite_diff;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1, |numeric|)
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords: usize,
}

/// Compare the tape gradient of `f` at `x` with central differences.
///
/// Returns the maximum relative error over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_err)
}

/// Gradient check with respect to several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(param_err!("finite-difference eps {eps} outside [1e-6, 1e-2]"));
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let reference = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, coords: 0 };
    let mut probe_err = None;
    for (k, x) in xs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|g| g.to_f64_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
        let numeric = finite_diff(
            |xk| {
                let mut inputs = xs.to_vec();
                inputs[k] = xk.clone();
                match eval(&inputs) {
                    Ok(v) => v,
                    Err(e) => {
                        probe_err.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            x,
            eps,
        );
        if let Some(e) = probe_err.take() {
            return Err(e);
        }
        for (a, n) in analytic.iter().zip(numeric.data()) {
            let abs = (a - n).abs();
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(abs / n.abs().max(1.0));
        }
        report.coords += x.numel();
    }

    let again = eval(xs)?;
    if again.to_bits() != reference.to_bits() {
        return Err(Error::Check(format!(
            "function is not deterministic: {reference:e} then {again:e} on identical inputs"
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;
    use std::cell::Cell;

    #[test]
    fn exact_quadratic() {
        let x = Tensor::new(&[5], vec![0.3, -1.2, 2.5, 0.0, 4.0]).unwrap();
        let err = grad_check(
            |tape, x| {
                let sq = nn::mul(tape, x, x)?;
                nn::sum(tape, sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn softmax_first_element() {
        let x = Tensor::new(&[5], vec![0.4, -0.9, 1.7, 0.05, -0.3]).unwrap();
        let err = grad_check(
            |tape, x| {
                let s = nn::softmax_lastdim(tape, x)?;
                nn::narrow(tape, s, 0, 0, 1)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        assert!(matches!(grad_check(nn::sum, &x, 0.5), Err(Error::Parameter(_))));
    }

    #[test]
    fn detects_nondeterminism() {
        let counter = Cell::new(0.0);
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(
            |tape, x| {
                counter.set(counter.get() + 1.0);
                let s = nn::sum(tape, x)?;
                nn::add_scalar(tape, s, counter.get())
            },
            &x,
            1e-3,
        );
        assert!(matches!(r, Err(Error::Check(_))));
    }
}

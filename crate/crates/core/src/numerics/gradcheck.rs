//! Central finite-difference gradient checker (64-bit).
//!
//! The checked function may return any shape; it is reduced to a scalar by
//! a fixed pseudo-random projection so every output element contributes.

use super::param::Param;
use super::tensor::{no_grad, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub const DEFAULT_STEP: f64 = 1e-4;
/// Denominator floor so near-zero gradients are compared on an absolute
/// scale of this size.
pub const DENOM_FLOOR: f64 = 1e-3;

fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + 1.0) * 0.754_877_666).sin() + 0.1).collect()
}

fn project(out: &Tensor<f64>, w: &[f64]) -> Result<Tensor<f64>> {
    if out.numel() == 1 {
        return Ok(out.mul_scalar(w[0]));
    }
    let wt = Tensor::from_vec(w.to_vec(), out.shape())?;
    Ok(out.mul(&wt)?.sum())
}

/// Checks gradients of `f` with respect to `params`, perturbing each element
/// by `±step`. `max_elems` caps the number of elements probed per param
/// (evenly strided) to bound runtime on larger composites.
pub fn check_params(
    params: &[Param<f64>],
    f: impl Fn() -> Result<Tensor<f64>>,
    step: f64,
    max_elems: Option<usize>,
) -> Result<GradCheckReport> {
    for p in params {
        p.zero_grad();
    }
    let out = f()?;
    let w = projection(out.numel());
    project(&out, &w)?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = || -> Result<f64> { no_grad(|| Ok(project(&f()?, &w)?.item())) };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (p, grad) in params.iter().zip(&analytic) {
        let base = p.get().to_vec();
        let n = base.len();
        let stride = max_elems.map_or(1, |m| n.div_ceil(m).max(1));
        for i in (0..n).step_by(stride) {
            let mut v = base.clone();
            v[i] = base[i] + step;
            p.set_data(v.clone());
            let plus = eval()?;
            v[i] = base[i] - step;
            p.set_data(v);
            let minus = eval()?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst_param = p.name().to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        p.set_data(base);
    }
    Ok(report)
}

/// Convenience wrapper for plain input tensors: `f` receives the current
/// leaf values in order.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    step: f64,
) -> Result<GradCheckReport> {
    let params: Vec<Param<f64>> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| Param::new(format!("input{i}"), t.to_vec(), t.shape()))
        .collect();
    check_params(
        &params,
        || {
            let vals: Vec<Tensor<f64>> = params.iter().map(Param::get).collect();
            f(&vals)
        },
        step,
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // exp's analytic gradient is correct; a hand-broken rule is not.
        let x = Tensor::<f64>::from_vec(vec![0.3, -0.2], &[2]).unwrap();
        let ok = check_inputs(&[x.clone()], |v| Ok(v[0].exp()), DEFAULT_STEP).unwrap();
        assert!(ok.passes(1e-6), "{ok:?}");
        let broken = check_inputs(&[x], |v| Ok(v[0].mul_scalar(2.0).detach().add(&v[0])?), DEFAULT_STEP).unwrap();
        assert!(!broken.passes(1e-4));
    }
}

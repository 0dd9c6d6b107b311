//! Central finite-difference verification of analytic gradients.
//!
//! The checker re-evaluates the loss closure at `x ± h` per parameter
//! element, so it is independent of the backward path it validates. Run it
//! with `f64` tensors; single precision drowns the differences in rounding
//! noise.

use crate::error::{Error, Result};

use super::backward::backward;
use super::tensor::{no_grad, Tensor};

/// Relative-error floor: treat |a|,|n| below this as zero-vs-zero.
const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub tolerance: f64,
    /// Max relative error per checked parameter, in input order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compare the analytic gradient of `f` (a scalar-loss closure over the
/// given parameter tensors) against `(f(x+h) - f(x-h)) / 2h` element by
/// element.
///
/// Errors if `f` does not produce a scalar or if a listed parameter never
/// receives a gradient (detached from the loss graph).
pub fn finite_difference_check<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = f()?;
    if loss.len() != 1 {
        return Err(Error::shape("finite_difference_check needs a scalar loss"));
    }
    backward(&loss)?;

    let mut analytic = Vec::with_capacity(params.len());
    for (name, p) in params {
        let grad = p
            .grad()
            .ok_or_else(|| Error::DetachedParameter(name.clone()))?;
        analytic.push(grad);
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        tolerance,
        per_param: Vec::with_capacity(params.len()),
    };
    for ((name, p), grads) in params.iter().zip(&analytic) {
        let mut param_max = 0.0f64;
        for i in 0..p.len() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + h;
            let plus = no_grad(&f)?.item()?;
            p.data_mut()[i] = orig - h;
            let minus = no_grad(&f)?.item()?;
            p.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            if rel > param_max {
                param_max = rel;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
        report.per_param.push((name.clone(), param_max));
    }
    Ok(report)
}

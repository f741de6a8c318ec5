//! Central finite-difference check of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest per-parameter error `‖a - n‖ / max(‖a‖, ‖n‖, floor)` with
    /// Euclidean norms over each parameter tensor. `floor` is the round-off
    /// level of the central difference, `√len · 10 · ε_mach · max(|f|, 1) / eps`,
    /// A tensor whose analytic and numeric norms both sit below `floor` is
    /// indistinguishable from zero at this step size and scores 0.
    pub max_relative_error: f64,
    /// Largest error of the same form taken entry by entry. Dominated by
    /// round-off on entries whose true gradient is close to zero.
    pub max_entry_error: f64,
}

fn relative(diff: f64, a: f64, n: f64, floor: f64) -> f64 {
    diff / a.max(n).max(floor)
}

/// Compares `analytic` gradients against central differences of `f` taken
/// entry by entry and returns the per-parameter relative error (see
/// [`GradCheck`]).
///
/// `f` must be deterministic. `params` is perturbed in place and restored.
pub fn finite_difference_check<F>(f: F, params: &mut [Tensor], analytic: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    Ok(finite_difference_report(f, params, analytic, eps)?.max_relative_error)
}

pub fn finite_difference_report<F>(mut f: F, params: &mut [Tensor], analytic: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid(format!("finite difference step {eps} outside (0, 1e-3]")));
    }
    if params.len() != analytic.len() {
        return Err(Error::invalid("one analytic gradient per parameter required"));
    }
    let mut report = GradCheck {
        max_relative_error: 0.0,
        max_entry_error: 0.0,
    };
    let base = f(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("objective at the evaluation point".into()));
    }
    let entry_floor = 10.0 * f64::EPSILON * base.abs().max(1.0) / eps;
    for p in 0..params.len() {
        if params[p].shape() != analytic[p].shape() {
            return Err(Error::Shape {
                op: "finite-difference",
                lhs: params[p].shape().to_vec(),
                rhs: analytic[p].shape().to_vec(),
            });
        }
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + eps;
            let up = f(params);
            params[p].data_mut()[i] = orig - eps;
            let down = f(params);
            params[p].data_mut()[i] = orig;
            let (up, down) = (up?, down?);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("objective while perturbing parameter {p}[{i}]")));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p].data()[i];
            let d = a - numeric;
            report.max_entry_error = report.max_entry_error.max(relative(d.abs(), a.abs(), numeric.abs(), entry_floor));
            diff2 += d * d;
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let floor = entry_floor * (params[p].len() as f64).sqrt();
        let err = if a2.sqrt().max(n2.sqrt()) < floor {
            0.0
        } else {
            relative(diff2.sqrt(), a2.sqrt(), n2.sqrt(), floor)
        };
        report.max_relative_error = report.max_relative_error.max(err);
    }
    Ok(report)
}

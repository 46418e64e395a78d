//! Central finite-difference verification of analytic gradients.

use crate::error::{PgatError, Result};

/// Per-coordinate comparison of an analytic gradient against central
/// differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|g_a − g_n| / max(1, |g_a|, |g_n|)` per coordinate.
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    /// Coordinate holding the maximum error.
    pub worst_index: Option<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central-difference gradient of `loss` at `x`.
pub fn central_difference<F>(mut loss: F, x: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = finite(loss(&probe)?, i)?;
        probe[i] = orig - epsilon;
        let minus = finite(loss(&probe)?, i)?;
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(grad)
}

/// Checks the analytic gradient returned by `loss_and_grad` at `x`.
///
/// `loss_and_grad` must be deterministic. Only the loss half is used for the
/// perturbed evaluations.
pub fn grad_check<F>(mut loss_and_grad: F, x: &[f64], epsilon: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(PgatError::Input(format!(
            "finite-difference epsilon {epsilon:e} outside [1e-7, 1e-4]"
        )));
    }
    let (loss, analytic) = loss_and_grad(x)?;
    finite(loss, usize::MAX)?;
    if analytic.len() != x.len() {
        return Err(PgatError::dim(format!(
            "analytic gradient has {} entries for {} parameters",
            analytic.len(),
            x.len()
        )));
    }
    let numeric = central_difference(|v| loss_and_grad(v).map(|(l, _)| l), x, epsilon)?;
    let relative_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .collect();
    let (worst_index, max_relative_error) = relative_errors
        .iter()
        .copied()
        .enumerate()
        .fold((None, 0.0), |(wi, wv), (i, v)| {
            if v > wv || wi.is_none() {
                (Some(i), v)
            } else {
                (wi, wv)
            }
        });
    Ok(GradCheckReport {
        analytic,
        numeric,
        relative_errors,
        max_relative_error,
        worst_index,
    })
}

fn finite(loss: f64, coord: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else if coord == usize::MAX {
        Err(PgatError::NonFinite(format!("loss evaluated to {loss}")))
    } else {
        Err(PgatError::NonFinite(format!(
            "loss evaluated to {loss} while perturbing coordinate {coord}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    // loss = 0.5 ‖W x‖², dL/dW = (W x) xᵀ
    fn quadratic(x: [f64; 2]) -> impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |w: &[f64]| {
            let wm = Matrix::from_vec(2, 2, w.to_vec())?;
            let xv = Matrix::column(&x);
            let wx = wm.matmul(&xv)?;
            let loss = 0.5 * wx.as_slice().iter().map(|v| v * v).sum::<f64>();
            let grad = wx.matmul_nt(&xv)?;
            Ok((loss, grad.into_vec()))
        }
    }

    #[test]
    fn quadratic_form_matches() {
        let report = grad_check(quadratic([0.3, -1.2]), &[1.0, 2.0, -0.5, 0.25], 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-8, "{}", report.max_relative_error);
    }

    #[test]
    fn dead_parameter_has_zero_gradient() {
        let f = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
            let live = w[0] * w[0];
            let dead = 0.0 * w[1];
            Ok((live + dead, vec![2.0 * w[0], 0.0]))
        };
        let report = grad_check(f, &[0.7, 3.0], 1e-5).unwrap();
        assert_eq!(report.analytic[1], 0.0);
        assert_eq!(report.numeric[1], 0.0);
        assert!(report.passes(1e-8));
    }

    #[test]
    fn non_finite_loss_propagates() {
        let f = |w: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((w[0].ln(), vec![1.0 / w[0]])) };
        assert!(matches!(
            grad_check(f, &[0.0], 1e-5),
            Err(PgatError::NonFinite(_))
        ));
    }

    #[test]
    fn epsilon_out_of_range_is_rejected() {
        assert!(grad_check(quadratic([1.0, 1.0]), &[0.0; 4], 1e-2).is_err());
    }
}

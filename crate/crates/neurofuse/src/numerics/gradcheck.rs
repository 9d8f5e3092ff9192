//! Finite-difference gradient oracle.
//!
//! [`finite_diff_grad`] is the independent reference every analytic gradient
//! in this crate is checked against: central differences, coordinate by
//! coordinate. [`check_gradient`] compares an analytic gradient against it
//! and reports the worst relative error.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x`:
/// `(f(x + h e_i) - f(x - h e_i)) / (2h)` per coordinate.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::contract("finite_diff_grad", "h must be positive"));
    }
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { context: format!("finite_diff_grad coordinate {}", i) });
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Outcome of comparing an analytic gradient to the finite-difference oracle.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Relative error with an absolute floor so near-zero gradients do not blow
/// up the ratio: `|a - f| / max(|a|, |f|, 1e-6)`.
pub fn check_gradient(analytic: &Tensor, numeric: &Tensor) -> Result<GradCheck> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::dim(
            "check_gradient",
            format!("{:?} vs {:?}", analytic.shape(), numeric.shape()),
        ));
    }
    let mut worst = 0.0;
    let mut worst_i = 0;
    for (i, (&a, &f)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
            worst_i = i;
        }
    }
    Ok(GradCheck { max_rel_error: worst, worst_coordinate: worst_i })
}

/// Sampled-coordinate finite differences for large parameter tensors: only
/// the listed coordinates are probed; the rest of the numeric gradient is
/// copied from the analytic one so `check_gradient` can run unchanged.
pub fn finite_diff_grad_sampled<F>(
    f: F,
    x: &Tensor,
    h: f64,
    coords: &[usize],
    analytic: &Tensor,
) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut grad = analytic.clone();
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { context: format!("finite_diff_grad coordinate {}", i) });
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_vec(2, 2, vec![0.3, -1.2, 4.0, 0.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn square_at_three_gives_six() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|t| Ok(t.data()[0]), &x, 0.0).is_err());
    }

    #[test]
    fn surfaces_nonfinite_objective() {
        let x = Tensor::scalar(0.0);
        let r = finite_diff_grad(|t| Ok(1.0 / t.data()[0]), &x, 1e-5);
        // 1/x is finite at +-h, so pick something that actually blows up.
        assert!(r.is_ok());
        let r = finite_diff_grad(|t| Ok((t.data()[0] - 1e-5).ln()), &x, 1e-5);
        assert!(r.is_err());
    }
}

//! Central-difference gradient estimation, the independent oracle against
//! which every backward rule is checked.

use crate::tensor::{Tensor, TensorError};

/// Central-difference gradient of a deterministic scalar function, one
/// coordinate at a time.
pub fn finite_difference_grad<F>(
    mut f: F,
    point: &Tensor,
    step: f64,
) -> Result<Tensor, TensorError>
where
    F: FnMut(&Tensor) -> Result<f64, TensorError>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut grad = vec![0.0; point.numel()];
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFinite {
                context: format!("finite_difference_grad at coordinate {i}"),
            });
        }
        grad[i] = (up - down) / (2.0 * step);
    }
    Tensor::new(point.shape().to_vec(), grad)
}

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Max relative error between an analytic gradient and its estimate.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_function_gradient() {
        // f(x) = x^2 at x = 3: derivative 6
        let point = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = finite_difference_grad(|t| Ok(t.data()[0] * t.data()[0]), &point, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_gradient_is_zero() {
        let point = Tensor::new(vec![4], vec![1.0, -2.0, 0.0, 7.0]).unwrap();
        let g = finite_difference_grad(|_| Ok(42.0), &point, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let point = Tensor::new(vec![1], vec![0.5]).unwrap();
        let err =
            finite_difference_grad(|t| Ok((t.data()[0] - 0.5).ln()), &point, 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }
}

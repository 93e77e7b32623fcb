//! Central-difference gradient verification.

use crate::error::{ensure, Error, Result};

use super::tensor::Tensor;

/// Relative error `|a − n| / max(1e−8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare the analytic gradient returned by `f` against central
/// differences with step `h` at every coordinate of `x`. Returns the
/// maximum relative error.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    gradient_check_at(f, x, h, &all)
}

/// As [`gradient_check`], restricted to the given coordinates.
pub fn gradient_check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    ensure!(h > 0.0 && h.is_finite(), Contract, "step must be positive, got {h}");
    let (v0, analytic) = f(x)?;
    ensure!(v0.is_finite(), Numeric, "function value is not finite");
    x.same_shape(&analytic)?;
    ensure!(analytic.is_finite(), Numeric, "analytic gradient is not finite");
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        ensure!(i < x.numel(), Contract, "coordinate {i} out of range");
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, _) = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (fm, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value near coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

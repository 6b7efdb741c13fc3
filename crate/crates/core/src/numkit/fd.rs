//! Central-difference gradient oracle.
//!
//! Every analytic gradient in this crate is checked against this routine.
//! It lives in the library (not test code) because calibration tests and the
//! debug mode of the privatizer use it too.

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum FdError {
    #[error("objective is non-finite at probe point (coordinate {0})")]
    NonFiniteProbe(usize),
    #[error("step must be positive")]
    BadStep,
}

/// Gradient of `f` at `theta` by central differences with step `step`.
pub fn grad_oracle<F: Real>(
    mut f: impl FnMut(&[F]) -> F,
    theta: &[F],
    step: f64,
) -> Result<Vec<F>, FdError> {
    if !(step > 0.0) {
        return Err(FdError::BadStep);
    }
    let s = F::c(step);
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + s;
        let fp = f(&probe);
        probe[i] = theta[i] - s;
        let fm = f(&probe);
        probe[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(FdError::NonFiniteProbe(i));
        }
        grad.push((fp - fm) / (F::c(2.0) * s));
    }
    Ok(grad)
}

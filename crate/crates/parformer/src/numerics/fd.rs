//! Finite-difference gradient oracle.
//!
//! Central differences with a per-coordinate step scaled by the coordinate
//! magnitude. Used to certify every hand-derived adjoint in this crate; it is
//! deliberately independent of the tape.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Real, Tensor};

/// A scalar-valued function bundled with its claimed analytic gradient.
/// Tests compare `gradient` against [`finite_difference_gradient`] applied to
/// `forward`.
pub struct DifferentiableFn<'a, T: Real> {
    pub forward: Box<dyn Fn(&Tensor<T>) -> Result<Tensor<T>> + 'a>,
    pub gradient: Box<dyn Fn(&Tensor<T>) -> Result<Tensor<T>> + 'a>,
}

impl<'a, T: Real> DifferentiableFn<'a, T> {
    pub fn new(
        forward: impl Fn(&Tensor<T>) -> Result<Tensor<T>> + 'a,
        gradient: impl Fn(&Tensor<T>) -> Result<Tensor<T>> + 'a,
    ) -> Self {
        DifferentiableFn {
            forward: Box::new(forward),
            gradient: Box::new(gradient),
        }
    }
}

/// g_i = (f(x + h e_i) - f(x - h e_i)) / (2h), h = h_scale * max(1, |x_i|).
///
/// `f` must be scalar-valued; a non-scalar output is a contract error.
pub fn finite_difference_gradient<T: Real>(
    f: &DifferentiableFn<'_, T>,
    x: &Tensor<T>,
    h_scale: T,
) -> Result<Tensor<T>> {
    let probe = (f.forward)(x)?;
    if probe.numel() != 1 {
        return Err(Error::Contract(format!(
            "finite differences need a scalar function, got output shape {:?}",
            probe.shape()
        )));
    }
    let mut grad = vec![T::ZERO; x.numel()];
    let mut work = x.clone();
    for i in 0..x.numel() {
        let xi = x.data()[i];
        let h = h_scale * T::ONE.max(xi.abs());
        work.data_mut()[i] = xi + h;
        let f_plus = (f.forward)(&work)?.item()?;
        work.data_mut()[i] = xi - h;
        let f_minus = (f.forward)(&work)?.item()?;
        work.data_mut()[i] = xi;
        grad[i] = (f_plus - f_minus) / (T::from_f64(2.0) * h);
    }
    Tensor::new(x.shape(), grad)
}

/// Relative error between an analytic and a numerical gradient entry,
/// with the conventional guard for the both-near-zero case.
pub fn relative_error(analytic: f64, numerical: f64) -> f64 {
    let denom = (analytic.abs() + numerical.abs()).max(1e-8);
    (analytic - numerical).abs() / denom
}

/// Largest per-coordinate relative error between two gradient tensors.
pub fn max_relative_error<T: Real>(analytic: &Tensor<T>, numerical: &Tensor<T>) -> Result<f64> {
    if analytic.shape() != numerical.shape() {
        return Err(Error::dimension(
            "gradient comparison",
            analytic.shape(),
            numerical.shape(),
        ));
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numerical.data())
        .map(|(&a, &n)| relative_error(a.to_f64(), n.to_f64()))
        .fold(0.0, f64::max))
}

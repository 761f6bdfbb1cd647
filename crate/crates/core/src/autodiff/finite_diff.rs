//! Central finite differences: the reference every backward rule is
//! checked against.

use crate::autodiff::value::Value;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar-valued function at `x`:
/// `g[i] = (f(x + h e_i) - f(x - h e_i)) / (2h)`.
///
/// Rejects a non-positive step and any non-finite function evaluation.
pub fn finite_difference_gradient<F>(f: F, x: &Value, h: f64) -> Result<Value>
where
    F: Fn(&Value) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite difference step must be positive, got {h}")));
    }
    let mut grad = Value::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Domain {
                op: "finite_difference",
                detail: format!("non-finite evaluation near element {i} ({fp}, {fm})"),
            });
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

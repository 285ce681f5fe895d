use crate::error::{Error, Result};
use crate::numkern::{Param, Tensor};

pub const DEFAULT_EPS: f64 = 1e-3;

/// Central-difference gradient of `f` with respect to every coordinate of `p`.
///
/// The step actually taken is measured after rounding the perturbed value to
/// `f32`, so the quotient uses the true spacing rather than `2 * eps`.
pub fn finite_diff_grad(
    p: &Param,
    eps: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::config(format!("finite-difference eps {eps} must be > 0")));
    }
    let mut probe = p.value.clone();
    let mut out = vec![0.0f32; probe.len()];
    for i in 0..probe.len() {
        let orig = probe.data()[i];
        let hi = (orig as f64 + eps) as f32;
        let lo = (orig as f64 - eps) as f32;
        probe.data_mut()[i] = hi;
        let f_hi = f(&probe);
        probe.data_mut()[i] = lo;
        let f_lo = f(&probe);
        probe.data_mut()[i] = orig;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite objective at coordinate {i}"
            )));
        }
        out[i] = ((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32;
    }
    Tensor::new(p.value.shape(), out)
}

/// Largest coordinate-wise relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> Result<f64> {
    analytic.check_same(numeric)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let (a, n) = (a as f64, n as f64);
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max))
}

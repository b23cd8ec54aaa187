use super::backward::backward;
use super::tensor::Tensor;
use super::Real;
use crate::error::{Error, Result};

/// Worst coordinate found by [`grad_check_many`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares backward against central differences for a scalar `f` of one
/// tensor. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let report = grad_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), step)?;
    Ok(report.max_rel_error)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], step: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }

    let tracked: Vec<Tensor<T>> = inputs.iter().map(Tensor::to_param).collect();
    let out = f(&tracked)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss(out.shape().to_vec()));
    }
    backward(&out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe: Vec<Tensor<T>> = inputs.iter().map(Tensor::detach).collect();

    for (which, x) in tracked.iter().enumerate() {
        let analytic = x.grad().unwrap_or_else(|| vec![T::ZERO; x.numel()]);
        let base = x.to_vec();
        for i in 0..base.len() {
            let xi = base[i].to_f64();
            let plus = T::from_f64(xi + step);
            let minus = T::from_f64(xi - step);
            // Use the perturbation that survives rounding to T.
            let delta = plus.to_f64() - minus.to_f64();

            let mut shifted = base.clone();
            shifted[i] = plus;
            probe[which] = Tensor::new(x.shape(), shifted.clone())?;
            let f_plus = f(&probe)?.item()?;
            shifted[i] = minus;
            probe[which] = Tensor::new(x.shape(), shifted)?;
            let f_minus = f(&probe)?.item()?;

            let numeric = (f_plus - f_minus) / delta;
            let a = analytic[i].to_f64();
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((which, i));
                report.analytic = a;
                report.numeric = numeric;
            }
            report.coordinates += 1;
        }
        probe[which] = x.detach();
    }
    Ok(report)
}

//! Central finite-difference gradient checking.

use super::tensor::Tensor;
use crate::error::Result;

/// One checked coordinate.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Relative error with a small absolute floor in the denominator so that
/// coordinates with (near) zero gradient are judged on absolute error.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic` gradients against central differences of `loss_fn` at
/// the listed `(tensor, index)` coordinates of `params`.
pub fn check_coords<F>(
    params: &[Tensor],
    analytic: &[Tensor],
    coords: &[(usize, usize)],
    step: f64,
    mut loss_fn: F,
) -> Result<Vec<GradSample>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &(t, i) in coords {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + step;
        let plus = loss_fn(&work)?;
        work[t].data_mut()[i] = orig - step;
        let minus = loss_fn(&work)?;
        work[t].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[t].data()[i];
        out.push(GradSample {
            tensor: t,
            index: i,
            analytic: a,
            numeric,
            rel_error: rel_error(a, numeric),
        });
    }
    Ok(out)
}

pub fn max_rel_error(samples: &[GradSample]) -> f64 {
    samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
}

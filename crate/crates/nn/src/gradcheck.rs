use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate where the worst error occurred.
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compares analytic gradients against central differences.
///
/// `f` returns the loss and its analytic gradients for a parameter set.
/// With `max_coords = Some(m)`, an evenly strided subset of `m` coordinates
/// is checked. The error per coordinate is
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(params: &ParamSet, step: f64, max_coords: Option<usize>, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(f64, Vec<Tensor>)>,
{
    let (_, analytic) = f(params)?;
    let flat: Vec<f64> = analytic.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = params.num_scalars();
    let coords: Vec<usize> = match max_coords {
        Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        coords_checked: coords.len(),
    };
    for &c in &coords {
        let orig = *probe.coord_mut(c);
        *probe.coord_mut(c) = orig + step;
        let (up, _) = f(&probe)?;
        *probe.coord_mut(c) = orig - step;
        let (down, _) = f(&probe)?;
        *probe.coord_mut(c) = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = flat[c];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = c;
        }
    }
    Ok(report)
}

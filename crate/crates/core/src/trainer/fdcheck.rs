//! Central-difference gradient verification.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct FdEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst: Option<FdEntry>,
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compares the analytic gradient returned by `loss_fn` at `params` with
/// central differences using `h = 1e-5·max(1, |x|)`.
///
/// The relative error per coordinate is `|a − n| / max(|a|, |n|, floor)`
/// with `floor = 1e-6·max(1, |f(x)|)`, so coordinates whose true gradient is
/// zero are judged against the loss scale rather than against rounding noise.
pub fn finite_diff_check<F>(mut loss_fn: F, params: &[f64], tolerance: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (f0, analytic) = loss_fn(params);
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let floor = 1e-6 * f0.abs().max(1.0);
    let mut x = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let xi = params[i];
        let h = 1e-5 * xi.abs().max(1.0);
        x[i] = xi + h;
        let fp = loss_fn(&x).0;
        x[i] = xi - h;
        let fm = loss_fn(&x).0;
        x[i] = xi;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        entries.push(FdEntry {
            index: i,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    let worst = entries
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned();
    Ok(FdReport {
        tolerance,
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.rel_error),
        worst,
        entries,
    })
}

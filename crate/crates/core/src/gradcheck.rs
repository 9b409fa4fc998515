//! Central-difference verification of analytic gradients.

use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("non-finite evaluation while probing coordinate {coord}")]
    NonFinite { coord: usize },
}

/// Compares the analytic gradient of a scalar function against central
/// differences at `point`.
///
/// `f` returns `(value, analytic_gradient)`. The reported error is
/// `max_i |analytic_i − central_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: &F, point: &[f64], step: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    assert!(step > 0.0, "step must be positive");
    let (value, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length mismatch");
    if !value.is_finite() {
        return Err(GradCheckError::NonFinite { coord: 0 });
    }

    let mut probe = point.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst_coord = 0usize;
    for i in 0..point.len() {
        if !analytic[i].is_finite() {
            return Err(GradCheckError::NonFinite { coord: i });
        }
        probe[i] = point[i] + step;
        let plus = f(&probe).0;
        probe[i] = point[i] - step;
        let minus = f(&probe).0;
        probe[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GradCheckError::NonFinite { coord: i });
        }
        let central = (plus - minus) / (2.0 * step);
        let rel = (analytic[i] - central).abs() / analytic[i].abs().max(1.0);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coord = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_coord,
    })
}

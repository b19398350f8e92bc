//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_coords: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradcheck over {} coords: max rel err {:.3e} at coord {} (analytic {:.6e}, numeric {:.6e}), tol {:.1e} -> {}",
            self.n_coords,
            self.max_rel_err,
            self.worst_coord,
            self.worst_analytic,
            self.worst_numeric,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Compares an analytic gradient against central differences of `f` around
/// `x0`, coordinate by coordinate. Relative error uses
/// `|a - n| / max(|a|, |n|, 1e-4)`: below magnitude 1e-4 the comparison is
/// effectively absolute, because central differences at step ~1e-5 on an
/// O(1) objective cannot resolve relative error there (their own noise
/// floor is ~1e-10), while any genuine backward defect at such coordinates
/// still produces errors far above the implied 1e-8 absolute bound.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x0: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if x0.len() != analytic.len() {
        return Err(Error::Shape {
            op: "finite_diff_check",
            msg: format!(
                "gradient length {} does not match parameter length {}",
                analytic.len(),
                x0.len()
            ),
        });
    }
    if x0.is_empty() {
        return Err(Error::Shape {
            op: "finite_diff_check",
            msg: "no coordinates to check".into(),
        });
    }
    let mut x = x0.to_vec();
    let mut worst = (0usize, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let f_plus = f(&x)?;
        x[i] = orig - step;
        let f_minus = f(&x)?;
        x[i] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_check objective at coordinate {i} (f+ = {f_plus}, f- = {f_minus})"
            )));
        }
        let numeric = (f_plus - f_minus) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        if rel > worst.1 {
            worst = (i, rel, a, numeric);
        }
    }
    Ok(GradCheckReport {
        n_coords: x0.len(),
        max_rel_err: worst.1,
        worst_coord: worst.0,
        worst_analytic: worst.2,
        worst_numeric: worst.3,
        tolerance,
    })
}

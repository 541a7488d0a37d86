//! Central finite-difference gradient checking.
//!
//! Relative error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`,
//! which behaves like absolute error for small gradients.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Step for `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub options: GradCheckOptions,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    /// The `k` entries with largest relative error, worst first.
    pub fn worst(&self, k: usize) -> Vec<&GradCheckEntry> {
        let mut v: Vec<&GradCheckEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        v.truncate(k);
        v
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares `analytic[i]` against central differences of `f` for every
/// coordinate listed in `coords` (all coordinates when `None`).
///
/// `f` is evaluated twice at `params` first; differing values are reported as
/// [`Error::Nondeterministic`].
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    labels: &dyn Fn(usize) -> String,
    coords: Option<&[usize]>,
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Shape {
            op: "finite_diff_check",
            lhs: vec![params.len()],
            rhs: vec![analytic.len()],
        });
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Nondeterministic { first, second });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let h = options.step;
    let mut x = params.to_vec();
    let mut entries = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= params.len() {
            return Err(Error::OutOfBounds {
                what: "parameters",
                index: i,
                len: params.len(),
            });
        }
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x)?;
        x[i] = orig - h;
        let minus = f(&x)?;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel_error = relative_error(analytic[i], numeric);
        entries.push(GradCheckEntry {
            label: labels(i),
            analytic: analytic[i],
            numeric,
            rel_error,
            passed: rel_error < options.tolerance,
        });
    }
    Ok(GradCheckReport { entries, options })
}

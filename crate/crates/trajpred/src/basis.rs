//! Basis expansions mapping a time point to a feature vector.
//!
//! Two kinds are supported: clamped B-splines (used for the subtype
//! trajectories) and low-order polynomials (used for the population and
//! individual components). Times are carried as double-precision years.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Specification of a basis expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisConfig {
    /// Clamped B-spline basis: boundary knots are repeated `degree + 1`
    /// times so the basis spans constants at both ends of the interval.
    Bspline {
        boundary_knots: (f64, f64),
        interior_knots: Vec<f64>,
        degree: usize,
    },
    /// Monomial basis `[1, t, t^2, ...]` of the given degree.
    Polynomial { degree: usize },
}

impl BasisConfig {
    /// B-spline over `(lo, hi)` with `n` equally spaced interior knots.
    pub fn bspline_equally_spaced(lo: f64, hi: f64, n_interior: usize, degree: usize) -> Self {
        let step = (hi - lo) / (n_interior as f64 + 1.0);
        let interior = (1..=n_interior).map(|k| lo + step * k as f64).collect();
        BasisConfig::Bspline {
            boundary_knots: (lo, hi),
            interior_knots: interior,
            degree,
        }
    }

    pub fn polynomial(degree: usize) -> Self {
        BasisConfig::Polynomial { degree }
    }

    /// Output dimension of the expansion.
    pub fn dim(&self) -> usize {
        match self {
            BasisConfig::Bspline {
                interior_knots,
                degree,
                ..
            } => interior_knots.len() + degree + 1,
            BasisConfig::Polynomial { degree } => degree + 1,
        }
    }

    /// Check the knot invariants. Called by constructors of larger objects.
    pub fn validate(&self) -> Result<()> {
        if let BasisConfig::Bspline {
            boundary_knots: (lo, hi),
            interior_knots,
            ..
        } = self
        {
            if !(lo < hi) {
                return Err(Error::Parameter(format!(
                    "boundary knots must satisfy lo < hi, got ({lo}, {hi})"
                )));
            }
            let mut prev = *lo;
            for (k, &t) in interior_knots.iter().enumerate() {
                if !(t > prev) || !(t < *hi) {
                    return Err(Error::Parameter(format!(
                        "interior knot {k} ({t}) must lie strictly inside ({lo}, {hi}) \
                         and be strictly increasing"
                    )));
                }
                prev = t;
            }
        }
        Ok(())
    }

    /// The interval on which a B-spline basis is defined; polynomials are
    /// unrestricted and report an infinite interval.
    pub fn support(&self) -> (f64, f64) {
        match self {
            BasisConfig::Bspline { boundary_knots, .. } => *boundary_knots,
            BasisConfig::Polynomial { .. } => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Full clamped knot vector (boundary knots repeated `degree + 1` times).
    fn knot_vector(&self) -> Option<Vec<f64>> {
        match self {
            BasisConfig::Bspline {
                boundary_knots: (lo, hi),
                interior_knots,
                degree,
            } => {
                let mut knots = Vec::with_capacity(interior_knots.len() + 2 * (degree + 1));
                knots.extend(std::iter::repeat(*lo).take(degree + 1));
                knots.extend_from_slice(interior_knots);
                knots.extend(std::iter::repeat(*hi).take(degree + 1));
                Some(knots)
            }
            BasisConfig::Polynomial { .. } => None,
        }
    }
}

/// Evaluate the basis at a single time, `Phi(t)`.
///
/// For B-splines `t` must lie inside the boundary knots; entries are
/// non-negative and sum to one there. Computed with the Cox-de Boor
/// recursion in its triangular form.
pub fn evaluate_basis(config: &BasisConfig, t: f64) -> Result<DVector<f64>> {
    match config {
        BasisConfig::Polynomial { degree } => {
            let mut v = DVector::zeros(degree + 1);
            let mut p = 1.0;
            for k in 0..=*degree {
                v[k] = p;
                p *= t;
            }
            Ok(v)
        }
        BasisConfig::Bspline {
            boundary_knots: (lo, hi),
            degree,
            ..
        } => {
            if !(t >= *lo && t <= *hi) {
                return Err(Error::Domain(format!(
                    "time {t} outside B-spline boundary [{lo}, {hi}]"
                )));
            }
            let knots = config.knot_vector().expect("bspline has knots");
            Ok(bspline_values(&knots, *degree, config.dim(), t))
        }
    }
}

/// Like [`evaluate_basis`] but clamps out-of-range B-spline queries to the
/// nearest boundary instead of erroring. Returns whether clamping happened
/// so callers can warn.
pub fn evaluate_basis_clamped(config: &BasisConfig, t: f64) -> (DVector<f64>, bool) {
    let (lo, hi) = config.support();
    let tc = t.clamp(lo, hi);
    let v = evaluate_basis(config, tc).expect("clamped time is in range");
    (v, tc != t)
}

/// All nonzero B-spline basis values at `t`, scattered into a dense vector.
fn bspline_values(knots: &[f64], degree: usize, dim: usize, t: f64) -> DVector<f64> {
    let span = find_span(knots, degree, dim, t);

    // Triangular Cox-de Boor scheme: after step j, n[0..=j] holds the
    // values of the j-degree functions that are nonzero on this span.
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { n[r] / denom } else { 0.0 };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }

    let mut out = DVector::zeros(dim);
    for (r, &value) in n.iter().enumerate() {
        out[span - degree + r] = value;
    }
    out
}

/// Index of the knot span containing `t`: the largest `k` with
/// `knots[k] <= t < knots[k+1]`, except at the right boundary where the
/// last span is used so the basis is left-continuous there.
fn find_span(knots: &[f64], degree: usize, dim: usize, t: f64) -> usize {
    let last = dim - 1; // highest valid span index
    if t >= knots[last + 1] {
        return last;
    }
    let mut lo = degree;
    let mut hi = last;
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if knots[mid] <= t {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Stack `evaluate_basis` row-wise over a set of times: row `j` is
/// `Phi(times[j])`. Errors carry the offending row index.
pub fn design_matrix(config: &BasisConfig, times: &[f64]) -> Result<DMatrix<f64>> {
    let d = config.dim();
    let mut m = DMatrix::zeros(times.len(), d);
    for (j, &t) in times.iter().enumerate() {
        let row = evaluate_basis(config, t)
            .map_err(|e| e.with_context(&format!("design matrix row {j}")))?;
        m.row_mut(j).copy_from(&row.transpose());
    }
    Ok(m)
}

/// Clamping variant of [`design_matrix`]; returns the number of clamped rows.
pub fn design_matrix_clamped(config: &BasisConfig, times: &[f64]) -> (DMatrix<f64>, usize) {
    let d = config.dim();
    let mut m = DMatrix::zeros(times.len(), d);
    let mut clamped = 0;
    for (j, &t) in times.iter().enumerate() {
        let (row, was_clamped) = evaluate_basis_clamped(config, t);
        if was_clamped {
            clamped += 1;
        }
        m.row_mut(j).copy_from(&row.transpose());
    }
    (m, clamped)
}

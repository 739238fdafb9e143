//! Ornstein-Uhlenbeck kernel, the composite marginal covariance, and the
//! positive-definite solves every other module routes through.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, BasisConfig};
use crate::error::{Error, Result};

/// Ornstein-Uhlenbeck kernel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    /// Amplitude `a` (marker units); the kernel value at zero lag is `a^2`.
    pub amplitude: f64,
    /// Length scale in years.
    pub length_scale: f64,
}

impl OuParams {
    pub fn new(amplitude: f64, length_scale: f64) -> Result<Self> {
        if !(amplitude > 0.0) || !(length_scale > 0.0) {
            return Err(Error::Parameter(format!(
                "OU parameters must be positive, got amplitude={amplitude}, \
                 length_scale={length_scale}"
            )));
        }
        Ok(OuParams {
            amplitude,
            length_scale,
        })
    }
}

/// Observation noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma2: f64,
}

impl NoiseParams {
    pub fn new(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(Error::Parameter(format!(
                "noise variance must be positive, got {sigma2}"
            )));
        }
        Ok(NoiseParams { sigma2 })
    }
}

/// `a^2 * exp(-|t1 - t2| / l)`. Lags beyond `700 * l` return exactly zero
/// to keep subnormals out of downstream factorizations.
pub fn ou_kernel(p: &OuParams, t1: f64, t2: f64) -> f64 {
    let lag = (t1 - t2).abs();
    if lag > 700.0 * p.length_scale {
        return 0.0;
    }
    p.amplitude * p.amplitude * (-lag / p.length_scale).exp()
}

/// OU Gram matrix between two sets of times.
pub fn ou_cross(p: &OuParams, rows: &[f64], cols: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| ou_kernel(p, rows[i], cols[j]))
}

/// `K_OU(times, times) + sigma2 * I`, the covariance of the structured-noise
/// regression once the individual component is conditioned away.
pub fn ou_gram_with_noise(p: &OuParams, noise: &NoiseParams, times: &[f64]) -> DMatrix<f64> {
    let mut k = ou_cross(p, times, times);
    for i in 0..times.len() {
        k[(i, i)] += noise.sigma2;
    }
    k
}

fn check_symmetric_pd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Parameter(format!(
            "{name} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(1e-300);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::Parameter(format!("{name} is not symmetric")));
            }
        }
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::Parameter(format!(
            "{name} is not positive definite"
        )));
    }
    Ok(())
}

/// Marginal covariance of the observed marker vector:
/// `Phi_l Sigma_b Phi_l^T + K_OU + sigma2 * I` evaluated pairwise on `times`.
///
/// The noise indicator applies per observation index, not per time value:
/// repeated measurement times stay distinct noisy observations, so the
/// result is strictly positive definite.
pub fn composite_covariance(
    sigma_b: &DMatrix<f64>,
    basis_individual: &BasisConfig,
    ou: &OuParams,
    noise: &NoiseParams,
    times: &[f64],
) -> Result<DMatrix<f64>> {
    check_symmetric_pd("Sigma_b", sigma_b)?;
    if sigma_b.nrows() != basis_individual.dim() {
        return Err(Error::Parameter(format!(
            "Sigma_b is {}x{} but the individual basis has dimension {}",
            sigma_b.nrows(),
            sigma_b.ncols(),
            basis_individual.dim()
        )));
    }
    let phi = design_matrix(basis_individual, times)?;
    let mut k = &phi * sigma_b * phi.transpose();
    k += ou_cross(ou, times, times);
    for i in 0..times.len() {
        k[(i, i)] += noise.sigma2;
    }
    // Symmetrize away rounding from the triple product.
    let kt = k.transpose();
    Ok((k + kt) * 0.5)
}

/// Cross-covariance block of the composite kernel between query times and
/// observation times. No noise term: distinct observation indices.
pub fn composite_cross(
    sigma_b: &DMatrix<f64>,
    basis_individual: &BasisConfig,
    ou: &OuParams,
    query: &[f64],
    obs: &[f64],
) -> Result<DMatrix<f64>> {
    let phi_q = design_matrix(basis_individual, query)?;
    let phi_o = design_matrix(basis_individual, obs)?;
    Ok(&phi_q * sigma_b * phi_o.transpose() + ou_cross(ou, query, obs))
}

/// Cholesky factorization with the standard jitter ladder.
///
/// On failure the diagonal is inflated by `1e-8 * mean(diag)`, escalating
/// tenfold up to `1e-4 * mean(diag)` before giving up. All downstream
/// solves go through this type so the numerical policy stays in one place.
pub struct PdFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    jitter: f64,
    dim: usize,
}

impl PdFactor {
    pub fn new(k: &DMatrix<f64>) -> Result<Self> {
        let n = k.nrows();
        if n != k.ncols() {
            return Err(Error::Parameter(format!(
                "matrix must be square, got {}x{}",
                n,
                k.ncols()
            )));
        }
        if n == 0 {
            // Trivial factorization of the 0x0 matrix.
            let chol = DMatrix::zeros(0, 0).cholesky().expect("0x0 is PD");
            return Ok(PdFactor {
                chol,
                jitter: 0.0,
                dim: 0,
            });
        }
        if let Some(chol) = k.clone().cholesky() {
            return Ok(PdFactor {
                chol,
                jitter: 0.0,
                dim: n,
            });
        }
        let mean_diag = k.diagonal().iter().sum::<f64>() / n as f64;
        let base = mean_diag.abs().max(1e-300);
        let mut rel = 1e-8;
        let mut ladder = Vec::new();
        while rel <= 1e-4 * (1.0 + 1e-12) {
            let jitter = rel * base;
            ladder.push(jitter);
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += jitter;
            }
            if let Some(chol) = kj.cholesky() {
                return Ok(PdFactor {
                    chol,
                    jitter,
                    dim: n,
                });
            }
            rel *= 10.0;
        }
        Err(Error::Numerical(format!(
            "Cholesky failed after jitter ladder {ladder:?}"
        )))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Jitter that was added to the diagonal, zero if none was needed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Solve `K X = B`.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vector(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `log det K` from the Cholesky factor.
    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
    }

    /// Quadratic form `r^T K^{-1} r`.
    pub fn quad_form(&self, r: &DVector<f64>) -> f64 {
        r.dot(&self.solve_vector(r))
    }
}

/// Solve `K X = B` for symmetric positive definite `K`.
pub fn pd_solve(k: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(PdFactor::new(k)?.solve_matrix(b))
}

/// `log det K` for symmetric positive definite `K`.
pub fn pd_logdet(k: &DMatrix<f64>) -> Result<f64> {
    Ok(PdFactor::new(k)?.logdet())
}

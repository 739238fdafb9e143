//! Core data model: individuals, datasets, the full parameter set, and the
//! shared likelihood computations used by both learning and prediction.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, BasisConfig};
use crate::error::{Error, Result};
use crate::kernels::{composite_covariance, NoiseParams, OuParams, PdFactor};

/// One individual's irregular marker time series plus baseline features.
///
/// Feature vectors carry an explicit leading intercept entry of 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub id: String,
    /// Years since first symptom, non-decreasing.
    pub times: Vec<f64>,
    /// Marker values (PFVC-like, roughly 0-120).
    pub values: Vec<f64>,
    /// Population-level features `x_ip`, intercept first.
    pub population_features: DVector<f64>,
    /// Subtype-regression features `x_iz`, intercept first.
    pub subtype_features: DVector<f64>,
}

impl IndividualRecord {
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        values: Vec<f64>,
        population_features: DVector<f64>,
        subtype_features: DVector<f64>,
    ) -> Result<Self> {
        let rec = IndividualRecord {
            id: id.into(),
            times,
            values,
            population_features,
            subtype_features,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.values.len() {
            return Err(Error::Data(format!(
                "individual {}: {} times but {} values",
                self.id,
                self.times.len(),
                self.values.len()
            )));
        }
        if self.times.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Data(format!(
                "individual {}: times must be non-decreasing",
                self.id
            )));
        }
        for (name, f) in [
            ("population", &self.population_features),
            ("subtype", &self.subtype_features),
        ] {
            if f.len() == 0 || f[0] != 1.0 {
                return Err(Error::Data(format!(
                    "individual {}: {name} features must start with an intercept entry of 1.0",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn n_obs(&self) -> usize {
        self.times.len()
    }

    pub fn values_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    /// Copy of this record keeping only observations with `t <= cutoff`.
    pub fn history_up_to(&self, cutoff: f64) -> IndividualRecord {
        let keep: Vec<usize> = (0..self.n_obs())
            .filter(|&j| self.times[j] <= cutoff)
            .collect();
        IndividualRecord {
            id: self.id.clone(),
            times: keep.iter().map(|&j| self.times[j]).collect(),
            values: keep.iter().map(|&j| self.values[j]).collect(),
            population_features: self.population_features.clone(),
            subtype_features: self.subtype_features.clone(),
        }
    }
}

/// Dataset metadata carried alongside the individuals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Names of the binary covariates (the intercept is implicit).
    pub feature_names: Vec<String>,
    pub marker_name: String,
}

/// A collection of individuals with consistent feature dimensionality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub individuals: Vec<IndividualRecord>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(individuals: Vec<IndividualRecord>, meta: DatasetMeta) -> Result<Self> {
        let ds = Dataset { individuals, meta };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for ind in &self.individuals {
            ind.validate()?;
            if !seen.insert(ind.id.as_str()) {
                return Err(Error::Data(format!("duplicate individual id {}", ind.id)));
            }
        }
        if let Some(first) = self.individuals.first() {
            let (qp, qz) = (
                first.population_features.len(),
                first.subtype_features.len(),
            );
            for ind in &self.individuals {
                if ind.population_features.len() != qp || ind.subtype_features.len() != qz {
                    return Err(Error::Data(format!(
                        "individual {}: inconsistent feature dimensions",
                        ind.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn find(&self, id: &str) -> Result<&IndividualRecord> {
        self.individuals
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::NotFound(format!("individual id {id}")))
    }
}

/// The full parameter set: feature-coefficient map, multinomial subtype
/// weights, subtype curves, random-effect covariance, kernel parameters,
/// and the three basis configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub num_subtypes: usize,
    /// Linear map from population features to trajectory coefficients
    /// (`d_p x q_p`).
    pub population_map: DMatrix<f64>,
    /// Multinomial logistic weights, one per subtype; the first is pinned
    /// to zero for identifiability.
    pub subtype_weights: Vec<DVector<f64>>,
    /// Subtype trajectory coefficients on the subtype basis.
    pub subtype_coeffs: Vec<DVector<f64>>,
    /// Covariance of the individual random effects (`d_l x d_l`).
    pub random_effect_cov: DMatrix<f64>,
    pub ou: OuParams,
    pub noise: NoiseParams,
    pub basis_population: BasisConfig,
    pub basis_subtype: BasisConfig,
    pub basis_individual: BasisConfig,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let g = self.num_subtypes;
        if g == 0 {
            return Err(Error::Parameter("need at least one subtype".into()));
        }
        if self.subtype_weights.len() != g || self.subtype_coeffs.len() != g {
            return Err(Error::Parameter(format!(
                "expected {g} weight and coefficient vectors, got {} and {}",
                self.subtype_weights.len(),
                self.subtype_coeffs.len()
            )));
        }
        if self.subtype_weights[0].iter().any(|&x| x != 0.0) {
            return Err(Error::Parameter(
                "first subtype weight vector must be exactly zero".into(),
            ));
        }
        for b in [
            &self.basis_population,
            &self.basis_subtype,
            &self.basis_individual,
        ] {
            b.validate()?;
        }
        if self.population_map.nrows() != self.basis_population.dim() {
            return Err(Error::Parameter(format!(
                "population map has {} rows but the population basis has dimension {}",
                self.population_map.nrows(),
                self.basis_population.dim()
            )));
        }
        let d_z = self.basis_subtype.dim();
        if self.subtype_coeffs.iter().any(|b| b.len() != d_z) {
            return Err(Error::Parameter(format!(
                "subtype coefficients must have dimension {d_z}"
            )));
        }
        let q_z = self.subtype_weights[0].len();
        if self.subtype_weights.iter().any(|w| w.len() != q_z) {
            return Err(Error::Parameter(
                "subtype weight vectors must share one dimension".into(),
            ));
        }
        if self.random_effect_cov.nrows() != self.basis_individual.dim()
            || self.random_effect_cov.ncols() != self.basis_individual.dim()
        {
            return Err(Error::Parameter(
                "random-effect covariance does not match the individual basis dimension".into(),
            ));
        }
        // PD check happens where the covariance is used; fail early here too.
        if self.random_effect_cov.clone().cholesky().is_none() {
            return Err(Error::Parameter(
                "random-effect covariance must be positive definite".into(),
            ));
        }
        Ok(())
    }

    /// Coefficients of the population component for one individual,
    /// `rho_i = Lambda x_ip`.
    pub fn population_coeffs(&self, population_features: &DVector<f64>) -> Result<DVector<f64>> {
        if population_features.len() != self.population_map.ncols() {
            return Err(Error::Parameter(format!(
                "population features have length {} but the map expects {}",
                population_features.len(),
                self.population_map.ncols()
            )));
        }
        Ok(&self.population_map * population_features)
    }

    /// Marginal covariance `K(t, t)` of an individual's observations.
    pub fn marginal_covariance(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        composite_covariance(
            &self.random_effect_cov,
            &self.basis_individual,
            &self.ou,
            &self.noise,
            times,
        )
    }
}

/// Numerically safe `log(sum(exp(v)))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax computed via max subtraction; entries positive, summing to one.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for x in &mut out {
        *x /= s;
    }
    out
}

/// Feature-dependent marginal subtype probabilities
/// `pi_g(x) = softmax_g(w_g^T x)`.
pub fn subtype_prior(params: &ModelParams, subtype_features: &DVector<f64>) -> Result<DVector<f64>> {
    let logits = subtype_logits(params, subtype_features)?;
    Ok(DVector::from_vec(softmax(&logits)))
}

pub(crate) fn subtype_logits(
    params: &ModelParams,
    subtype_features: &DVector<f64>,
) -> Result<Vec<f64>> {
    params
        .subtype_weights
        .iter()
        .map(|w| {
            if w.len() != subtype_features.len() {
                Err(Error::Parameter(format!(
                    "subtype features have length {} but weights expect {}",
                    subtype_features.len(),
                    w.len()
                )))
            } else {
                Ok(w.dot(subtype_features))
            }
        })
        .collect()
}

/// Mixture-component mean given pre-built design matrices.
pub(crate) fn mean_under_subtype_with(
    params: &ModelParams,
    ind: &IndividualRecord,
    g: usize,
    phi_p: &DMatrix<f64>,
    phi_z: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if g >= params.num_subtypes {
        return Err(Error::Parameter(format!(
            "subtype index {g} out of range for G={}",
            params.num_subtypes
        )));
    }
    let rho = params.population_coeffs(&ind.population_features)?;
    Ok(phi_p * rho + phi_z * &params.subtype_coeffs[g])
}

/// Mean of the marker vector under subtype `g` at the given times:
/// `Phi_p(t) Lambda x_ip + Phi_z(t) beta_g`.
pub fn mean_under_subtype(
    params: &ModelParams,
    ind: &IndividualRecord,
    g: usize,
    times: &[f64],
) -> Result<DVector<f64>> {
    let phi_p = design_matrix(&params.basis_population, times)?;
    let phi_z = design_matrix(&params.basis_subtype, times)?;
    mean_under_subtype_with(params, ind, g, &phi_p, &phi_z)
}

/// Multivariate normal log-density of a residual under a factored covariance.
pub(crate) fn mvn_logpdf_residual(factor: &PdFactor, resid: &DVector<f64>) -> f64 {
    let n = resid.len() as f64;
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + factor.logdet() + factor.quad_form(resid))
}

/// Per-subtype joint log terms `log pi_g(x_iz) + log N(y | m_g, K)` for one
/// individual, sharing a single covariance factorization across subtypes.
/// Returns `None` when the individual has no observations.
pub(crate) fn per_subtype_log_joint(
    params: &ModelParams,
    ind: &IndividualRecord,
) -> Result<Option<Vec<f64>>> {
    if ind.n_obs() == 0 {
        return Ok(None);
    }
    let log_prior: Vec<f64> = {
        let p = subtype_prior(params, &ind.subtype_features)?;
        p.iter().map(|&x| x.max(1e-300).ln()).collect()
    };
    let k = params
        .marginal_covariance(&ind.times)
        .map_err(|e| e.with_context(&format!("individual {}", ind.id)))?;
    let factor = PdFactor::new(&k).map_err(|e| e.with_context(&format!("individual {}", ind.id)))?;
    let phi_p = design_matrix(&params.basis_population, &ind.times)?;
    let phi_z = design_matrix(&params.basis_subtype, &ind.times)?;
    let y = ind.values_vector();
    let mut out = Vec::with_capacity(params.num_subtypes);
    for g in 0..params.num_subtypes {
        let mean = mean_under_subtype_with(params, ind, g, &phi_p, &phi_z)?;
        out.push(log_prior[g] + mvn_logpdf_residual(&factor, &(&y - mean)));
    }
    Ok(Some(out))
}

/// Log of the mixture marginal `P(y_i | X_i, Theta)` for one individual;
/// zero observations contribute zero.
pub fn individual_loglik(params: &ModelParams, ind: &IndividualRecord) -> Result<f64> {
    Ok(match per_subtype_log_joint(params, ind)? {
        None => 0.0,
        Some(terms) => log_sum_exp(&terms),
    })
}

/// Observed-data log-likelihood of a dataset: the sum over individuals of
/// the log mixture-of-Gaussians marginal. Per-individual terms are computed
/// in parallel and reduced in a fixed order so the result is bit-stable
/// across thread counts.
pub fn observed_data_loglik(params: &ModelParams, data: &Dataset) -> Result<f64> {
    let terms: Vec<Result<f64>> = data
        .individuals
        .par_iter()
        .map(|ind| individual_loglik(params, ind))
        .collect();
    let mut total = 0.0;
    for t in terms {
        total += t?;
    }
    Ok(total)
}

//! The three comparison models sharing the proposed model's B-spline
//! hyper-parameters: a feature-conditioned B-spline regression, the same
//! mean individualized by GP conditioning, and the proposed mixture with
//! the individual-specific components stripped out.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, design_matrix_clamped, BasisConfig};
use crate::error::{Error, Result};
use crate::kernels::{composite_covariance, ou_cross, PdFactor};
use crate::learning::{fit_em, m_step_weights, BasisSet, CovarianceParams, EmConfig, EmTrace};
use crate::model::{
    log_sum_exp, mvn_logpdf_residual, softmax, Dataset, IndividualRecord, ModelParams,
};
use crate::prediction::{predict_trajectory, PredictionMode};

/// Which comparison model a serialized file contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    BsplineFeatures,
    BsplineGp,
    NoPersonalization,
}

// ---------------------------------------------------------------------------
// B-spline regression on baseline features
// ---------------------------------------------------------------------------

/// Spline regression whose coefficients are a linear function of the
/// binary covariates: an intercept curve, one curve per feature, and one
/// per feature pair. Predictions ignore the marker history entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSplineModel {
    pub basis: BasisConfig,
    /// One coefficient vector per expansion term of the covariates.
    pub coeffs: Vec<DVector<f64>>,
    /// Number of non-intercept covariates the expansion was built for.
    pub n_features: usize,
}

/// Covariate expansion `[1, x_1, ..., x_k, x_1 x_2, x_1 x_3, ...]`; the
/// intercept is excluded from the pair terms and self-pairs are skipped.
fn interaction_expansion(features: &DVector<f64>) -> Vec<f64> {
    let k = features.len() - 1; // drop the leading intercept entry
    let mut phi = Vec::with_capacity(1 + k + k * k.saturating_sub(1) / 2);
    phi.push(1.0);
    for i in 0..k {
        phi.push(features[i + 1]);
    }
    for i in 0..k {
        for j in (i + 1)..k {
            phi.push(features[i + 1] * features[j + 1]);
        }
    }
    phi
}

/// Pooled ridge least squares over all observations of all individuals.
pub fn fit_bspline_features(
    data: &Dataset,
    basis: &BasisConfig,
    ridge: f64,
) -> Result<FeatureSplineModel> {
    let first = data
        .individuals
        .first()
        .ok_or_else(|| Error::Learning("cannot fit an empty dataset".into()))?;
    let n_features = first.subtype_features.len() - 1;
    let n_terms = interaction_expansion(&first.subtype_features).len();
    let d = basis.dim();
    let dim = n_terms * d;

    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for ind in &data.individuals {
        if ind.n_obs() == 0 {
            continue;
        }
        let phi_t = design_matrix(basis, &ind.times)
            .map_err(|e| e.with_context(&format!("individual {}", ind.id)))?;
        let phi_x = interaction_expansion(&ind.subtype_features);
        // row block for term m is phi_x[m] * phi_t
        let mut design = DMatrix::zeros(ind.n_obs(), dim);
        for (m, &w) in phi_x.iter().enumerate() {
            design.columns_mut(m * d, d).copy_from(&(&phi_t * w));
        }
        gram += design.transpose() * &design;
        rhs += design.transpose() * ind.values_vector();
    }
    for i in 0..dim {
        gram[(i, i)] += ridge;
    }
    let sol = PdFactor::new(&gram)?.solve_vector(&rhs);
    let coeffs = (0..n_terms)
        .map(|m| DVector::from_column_slice(&sol.as_slice()[m * d..(m + 1) * d]))
        .collect();
    Ok(FeatureSplineModel {
        basis: basis.clone(),
        coeffs,
        n_features,
    })
}

impl FeatureSplineModel {
    /// Effective curve coefficients for one covariate vector.
    pub fn curve_for(&self, subtype_features: &DVector<f64>) -> DVector<f64> {
        let phi_x = interaction_expansion(subtype_features);
        let mut c = DVector::zeros(self.basis.dim());
        for (m, &w) in phi_x.iter().enumerate() {
            c += &self.coeffs[m] * w;
        }
        c
    }

    /// Mean prediction at (possibly clamped) query times.
    pub fn mean_at(&self, subtype_features: &DVector<f64>, times: &[f64]) -> DVector<f64> {
        let (phi, _) = design_matrix_clamped(&self.basis, times);
        phi * self.curve_for(subtype_features)
    }
}

// ---------------------------------------------------------------------------
// B-spline + GP individualization
// ---------------------------------------------------------------------------

/// The feature-spline mean individualized by Gaussian conditioning under
/// the same composite covariance as the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsplineGpModel {
    pub mean: FeatureSplineModel,
    pub cov: CovarianceParams,
    pub basis_individual: BasisConfig,
}

pub fn fit_bspline_gp(
    data: &Dataset,
    basis: &BasisConfig,
    ridge: f64,
    cov: &CovarianceParams,
    basis_individual: &BasisConfig,
) -> Result<BsplineGpModel> {
    Ok(BsplineGpModel {
        mean: fit_bspline_features(data, basis, ridge)?,
        cov: cov.clone(),
        basis_individual: basis_individual.clone(),
    })
}

/// Conditioned prediction split into the mean, the random-effect part of
/// the conditioning, and the OU part.
pub struct GpPrediction {
    pub mean: DVector<f64>,
    pub individual: DVector<f64>,
    pub noise: DVector<f64>,
}

impl BsplineGpModel {
    pub fn predict_components(
        &self,
        ind: &IndividualRecord,
        query_times: &[f64],
    ) -> Result<GpPrediction> {
        let mean_q = self.mean.mean_at(&ind.subtype_features, query_times);
        if ind.n_obs() == 0 {
            let zeros = DVector::zeros(query_times.len());
            return Ok(GpPrediction {
                mean: mean_q,
                individual: zeros.clone(),
                noise: zeros,
            });
        }
        let mean_obs = self.mean.mean_at(&ind.subtype_features, &ind.times);
        let k_obs = composite_covariance(
            &self.cov.random_effect_cov,
            &self.basis_individual,
            &self.cov.ou,
            &self.cov.noise,
            &ind.times,
        )?;
        let alpha = PdFactor::new(&k_obs)?.solve_vector(&(ind.values_vector() - mean_obs));
        let (phi_q, _) = design_matrix_clamped(&self.basis_individual, query_times);
        let phi_o = design_matrix(&self.basis_individual, &ind.times)?;
        let individual = &phi_q * &self.cov.random_effect_cov * phi_o.transpose() * &alpha;
        let noise = ou_cross(&self.cov.ou, query_times, &ind.times) * &alpha;
        Ok(GpPrediction {
            mean: mean_q,
            individual,
            noise,
        })
    }

    pub fn predict(&self, ind: &IndividualRecord, query_times: &[f64]) -> Result<DVector<f64>> {
        let c = self.predict_components(ind, query_times)?;
        Ok(c.mean + c.individual + c.noise)
    }
}

// ---------------------------------------------------------------------------
// Proposed model without personalization
// ---------------------------------------------------------------------------

/// Covariance used by the reduced mixture's subtype posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducedCovariance {
    /// Pure mixture of fixed curves with iid noise (the default: both the
    /// random-effect and OU terms are individual-specific and excluded).
    IidOnly,
    /// Keep the OU term in the likelihood, for sensitivity analysis.
    WithOu,
}

/// The full model's curves and population map with the individual-specific
/// components removed; only the subtype weights are re-learned. Prediction
/// is the population term plus the MAP-subtype curve, with no individual
/// or structured-noise adjustment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoPersonalizationModel {
    pub params: ModelParams,
    pub covariance: ReducedCovariance,
}

fn reduced_log_joint(
    params: &ModelParams,
    covariance: ReducedCovariance,
    ind: &IndividualRecord,
    weights: &[DVector<f64>],
) -> Result<Vec<f64>> {
    let logits: Vec<f64> = weights.iter().map(|w| w.dot(&ind.subtype_features)).collect();
    let lse = log_sum_exp(&logits);
    if ind.n_obs() == 0 {
        return Ok(logits.iter().map(|l| l - lse).collect());
    }
    let n = ind.n_obs();
    let mut k = match covariance {
        ReducedCovariance::IidOnly => DMatrix::zeros(n, n),
        ReducedCovariance::WithOu => ou_cross(&params.ou, &ind.times, &ind.times),
    };
    for i in 0..n {
        k[(i, i)] += params.noise.sigma2;
    }
    let factor = PdFactor::new(&k)?;
    let phi_p = design_matrix(&params.basis_population, &ind.times)?;
    let phi_z = design_matrix(&params.basis_subtype, &ind.times)?;
    let rho = params.population_coeffs(&ind.population_features)?;
    let pop = phi_p * rho;
    let y = ind.values_vector();
    (0..params.num_subtypes)
        .map(|g| {
            let r = &y - &pop - &phi_z * &params.subtype_coeffs[g];
            Ok((logits[g] - lse) + mvn_logpdf_residual(&factor, &r))
        })
        .collect()
}

impl NoPersonalizationModel {
    /// Posterior over subtypes under the reduced covariance.
    pub fn posterior(&self, ind: &IndividualRecord) -> Result<DVector<f64>> {
        let joints = reduced_log_joint(
            &self.params,
            self.covariance,
            ind,
            &self.params.subtype_weights,
        )?;
        Ok(DVector::from_vec(softmax(&joints)))
    }

    /// Population term plus the MAP-subtype curve; ties break toward the
    /// smaller subtype index.
    pub fn predict(&self, ind: &IndividualRecord, query_times: &[f64]) -> Result<DVector<f64>> {
        let post = self.posterior(ind)?;
        let mut g_star = 0;
        for g in 1..self.params.num_subtypes {
            if post[g] > post[g_star] {
                g_star = g;
            }
        }
        let (phi_p, _) = design_matrix_clamped(&self.params.basis_population, query_times);
        let (phi_z, _) = design_matrix_clamped(&self.params.basis_subtype, query_times);
        let rho = self.params.population_coeffs(&ind.population_features)?;
        Ok(phi_p * rho + phi_z * &self.params.subtype_coeffs[g_star])
    }
}

/// Fix the curves and population map from a fitted full model and re-learn
/// the subtype weights under the reduced covariance by EM.
pub fn fit_no_personalization(
    data: &Dataset,
    full: &ModelParams,
    covariance: ReducedCovariance,
    em: &EmConfig,
) -> Result<NoPersonalizationModel> {
    let mut weights = vec![DVector::zeros(full.subtype_weights[0].len()); full.num_subtypes];
    let features: Vec<DVector<f64>> = data
        .individuals
        .iter()
        .map(|i| i.subtype_features.clone())
        .collect();
    for _ in 0..em.max_iters {
        let mut posteriors = DMatrix::zeros(data.len(), full.num_subtypes);
        for (i, ind) in data.individuals.iter().enumerate() {
            let joints = reduced_log_joint(full, covariance, ind, &weights)?;
            let p = softmax(&joints);
            for g in 0..full.num_subtypes {
                posteriors[(i, g)] = p[g];
            }
        }
        let (new_weights, _) = m_step_weights(
            &posteriors,
            &features,
            em.l2_weight_penalty,
            &weights,
            em.weight_grad_tol,
            em.weight_max_steps,
        );
        let delta = new_weights
            .iter()
            .zip(&weights)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0f64, f64::max);
        weights = new_weights;
        if delta < em.inner_tol {
            break;
        }
    }
    let mut params = full.clone();
    params.subtype_weights = weights;
    Ok(NoPersonalizationModel { params, covariance })
}

// ---------------------------------------------------------------------------
// Uniform fitting surface for the evaluation harness
// ---------------------------------------------------------------------------

/// Per-fold scratch shared between model specs, so the reduced mixture can
/// reuse the full model fitted on the same training fold.
#[derive(Default)]
pub struct FitContext {
    pub full_fit: Option<Arc<(ModelParams, EmTrace)>>,
}

/// A model specification the evaluation harness can fit on a training fold.
pub trait TrajectoryModel: Send + Sync {
    fn name(&self) -> String;
    fn fit(&self, train: &Dataset, ctx: &mut FitContext)
        -> Result<Box<dyn FittedTrajectoryModel>>;
}

/// A fitted model answering dynamic-prediction queries from a history.
pub trait FittedTrajectoryModel: Send + Sync {
    fn predict(&self, ind: &IndividualRecord, query_times: &[f64]) -> Result<Vec<f64>>;
}

/// The proposed model, evaluated with the MAP-subtype trajectory.
#[derive(Debug, Clone)]
pub struct FullModelSpec {
    pub num_subtypes: usize,
    pub cov: CovarianceParams,
    pub bases: BasisSet,
    pub em: EmConfig,
    pub mode: PredictionMode,
}

struct FittedFull {
    params: Arc<(ModelParams, EmTrace)>,
    mode: PredictionMode,
}

impl TrajectoryModel for FullModelSpec {
    fn name(&self) -> String {
        "full".to_string()
    }

    fn fit(
        &self,
        train: &Dataset,
        ctx: &mut FitContext,
    ) -> Result<Box<dyn FittedTrajectoryModel>> {
        let fit = match &ctx.full_fit {
            Some(f) => f.clone(),
            None => {
                let f = Arc::new(fit_em(
                    train,
                    self.num_subtypes,
                    &self.cov,
                    &self.bases,
                    &self.em,
                )?);
                ctx.full_fit = Some(f.clone());
                f
            }
        };
        Ok(Box::new(FittedFull {
            params: fit,
            mode: self.mode,
        }))
    }
}

impl FittedTrajectoryModel for FittedFull {
    fn predict(&self, ind: &IndividualRecord, query_times: &[f64]) -> Result<Vec<f64>> {
        Ok(predict_trajectory(&self.params.0, ind, query_times, self.mode)?.predicted)
    }
}

#[derive(Debug, Clone)]
pub struct BsplineFeaturesSpec {
    pub basis: BasisConfig,
    pub ridge: f64,
}

impl TrajectoryModel for BsplineFeaturesSpec {
    fn name(&self) -> String {
        "bspline-features".to_string()
    }

    fn fit(
        &self,
        train: &Dataset,
        _ctx: &mut FitContext,
    ) -> Result<Box<dyn FittedTrajectoryModel>> {
        Ok(Box::new(fit_bspline_features(
            train,
            &self.basis,
            self.ridge,
        )?))
    }
}

impl FittedTrajectoryModel for FeatureSplineModel {
    fn predict(&self, ind: &IndividualRecord, query_times: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .mean_at(&ind.subtype_features, query_times)
            .iter()
            .cloned()
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct BsplineGpSpec {
    pub basis: BasisConfig,
    pub ridge: f64,
    pub cov: CovarianceParams,
    pub basis_individual: BasisConfig,
}

impl TrajectoryModel for BsplineGpSpec {
    fn name(&self) -> String {
        "bspline-gp".to_string()
    }

    fn fit(
        &self,
        train: &Dataset,
        _ctx: &mut FitContext,
    ) -> Result<Box<dyn FittedTrajectoryModel>> {
        Ok(Box::new(fit_bspline_gp(
            train,
            &self.basis,
            self.ridge,
            &self.cov,
            &self.basis_individual,
        )?))
    }
}

impl FittedTrajectoryModel for BsplineGpModel {
    fn predict(&self, ind: &IndividualRecord, query_times: &[f64]) -> Result<Vec<f64>> {
        Ok(BsplineGpModel::predict(self, ind, query_times)?
            .iter()
            .cloned()
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct NoPersonalizationSpec {
    pub full: FullModelSpec,
    pub covariance: ReducedCovariance,
}

impl TrajectoryModel for NoPersonalizationSpec {
    fn name(&self) -> String {
        "no-personalization".to_string()
    }

    fn fit(
        &self,
        train: &Dataset,
        ctx: &mut FitContext,
    ) -> Result<Box<dyn FittedTrajectoryModel>> {
        let full = match &ctx.full_fit {
            Some(f) => f.clone(),
            None => {
                let f = Arc::new(fit_em(
                    train,
                    self.full.num_subtypes,
                    &self.full.cov,
                    &self.full.bases,
                    &self.full.em,
                )?);
                ctx.full_fit = Some(f.clone());
                f
            }
        };
        Ok(Box::new(fit_no_personalization(
            train,
            &full.0,
            self.covariance,
            &self.full.em,
        )?))
    }
}

impl FittedTrajectoryModel for NoPersonalizationModel {
    fn predict(&self, ind: &IndividualRecord, query_times: &[f64]) -> Result<Vec<f64>> {
        Ok(NoPersonalizationModel::predict(self, ind, query_times)?
            .iter()
            .cloned()
            .collect())
    }
}

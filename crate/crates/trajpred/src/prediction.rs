//! Dynamic posterior-predictive trajectory estimates from an individual's
//! partial history.
//!
//! Given offline-learned parameters, the online update infers the subtype
//! posterior, the expected subtype curve, and the individual random
//! effects, then adds a GP regression on the remaining residuals. Query
//! times outside the spline boundary are clamped with a warning.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, design_matrix_clamped};
use crate::error::Result;
use crate::kernels::{ou_cross, ou_gram_with_noise, PdFactor};
use crate::learning::e_step;
use crate::model::{subtype_prior, IndividualRecord, ModelParams};

/// Per-individual inferred quantities given a (possibly empty) history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorState {
    /// Posterior subtype probabilities.
    pub pi_star: DVector<f64>,
    /// Posterior-expected subtype coefficients.
    pub beta_star: DVector<f64>,
    /// Posterior mean of the individual random effects.
    pub b_star: DVector<f64>,
    /// Posterior covariance of the random effects; contracts the prior.
    pub sigma_b_star: DMatrix<f64>,
    /// History the state was computed from.
    pub history_times: Vec<f64>,
    pub history_values: Vec<f64>,
}

/// How the trajectory estimate handles the subtype posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Average over subtypes with posterior weights.
    PosteriorMean,
    /// Condition on the most likely subtype, recomputing the individual
    /// and structured-noise terms under its curve.
    MapSubtype,
}

/// Component breakdown of a trajectory estimate over query times. The four
/// components sum to the prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryPrediction {
    pub times: Vec<f64>,
    pub population: Vec<f64>,
    pub subpopulation: Vec<f64>,
    pub individual: Vec<f64>,
    pub noise: Vec<f64>,
    pub predicted: Vec<f64>,
    pub mode: PredictionMode,
    /// Subtypes ordered by decreasing posterior probability.
    pub ranked_subtypes: Vec<(usize, f64)>,
}

struct HistoryDesign {
    phi_z: DMatrix<f64>,
    phi_l: DMatrix<f64>,
    /// Factor of `K_OU + sigma2 I` on the history times.
    kf: PdFactor,
    y: DVector<f64>,
    population_mean: DVector<f64>,
}

fn history_design(params: &ModelParams, ind: &IndividualRecord) -> Result<HistoryDesign> {
    let ctx = format!("individual {}", ind.id);
    let phi_p = design_matrix(&params.basis_population, &ind.times)
        .map_err(|e| e.with_context(&ctx))?;
    let phi_z =
        design_matrix(&params.basis_subtype, &ind.times).map_err(|e| e.with_context(&ctx))?;
    let phi_l =
        design_matrix(&params.basis_individual, &ind.times).map_err(|e| e.with_context(&ctx))?;
    let kf = PdFactor::new(&ou_gram_with_noise(&params.ou, &params.noise, &ind.times))
        .map_err(|e| e.with_context(&ctx))?;
    let rho = params.population_coeffs(&ind.population_features)?;
    let population_mean = phi_p * rho;
    Ok(HistoryDesign {
        phi_z,
        phi_l,
        kf,
        y: ind.values_vector(),
        population_mean,
    })
}

/// Random-effect posterior mean conditioned on a given subtype-curve
/// coefficient vector.
fn b_posterior_mean(
    design: &HistoryDesign,
    sigma_b_star: &DMatrix<f64>,
    beta: &DVector<f64>,
) -> DVector<f64> {
    let resid = &design.y - &design.population_mean - &design.phi_z * beta;
    sigma_b_star * (design.phi_l.transpose() * design.kf.solve_vector(&resid))
}

fn sigma_b_posterior(params: &ModelParams, design: &HistoryDesign) -> Result<DMatrix<f64>> {
    let d = params.random_effect_cov.nrows();
    let prior_precision = PdFactor::new(&params.random_effect_cov)?
        .solve_matrix(&DMatrix::identity(d, d));
    let info = &prior_precision
        + design.phi_l.transpose() * design.kf.solve_matrix(&design.phi_l);
    let sigma = PdFactor::new(&info)?.solve_matrix(&DMatrix::identity(d, d));
    // symmetrize rounding from the two solves
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// Infer the per-individual posterior state from a partial history. An
/// empty history yields the prior state: `pi*` is the feature-conditional
/// prior, the random effects are zero with the prior covariance.
pub fn infer_posterior(params: &ModelParams, ind: &IndividualRecord) -> Result<PosteriorState> {
    let pi_star = e_step(params, ind)?;
    let mut beta_star = DVector::zeros(params.basis_subtype.dim());
    for (g, beta) in params.subtype_coeffs.iter().enumerate() {
        beta_star += beta * pi_star[g];
    }
    if ind.n_obs() == 0 {
        return Ok(PosteriorState {
            pi_star,
            beta_star,
            b_star: DVector::zeros(params.basis_individual.dim()),
            sigma_b_star: params.random_effect_cov.clone(),
            history_times: Vec::new(),
            history_values: Vec::new(),
        });
    }
    let design = history_design(params, ind)?;
    let sigma_b_star = sigma_b_posterior(params, &design)?;
    let b_star = b_posterior_mean(&design, &sigma_b_star, &beta_star);
    Ok(PosteriorState {
        pi_star,
        beta_star,
        b_star,
        sigma_b_star,
        history_times: ind.times.clone(),
        history_values: ind.values.clone(),
    })
}

/// Posterior mean of the structured-noise process at the query times,
/// conditioned on the state's expected subtype curve and random effects.
/// An empty history yields zeros.
pub fn predict_structured_noise(
    params: &ModelParams,
    ind: &IndividualRecord,
    state: &PosteriorState,
    query_times: &[f64],
) -> Result<DVector<f64>> {
    if ind.n_obs() == 0 {
        return Ok(DVector::zeros(query_times.len()));
    }
    let design = history_design(params, ind)?;
    let resid = &design.y
        - &design.population_mean
        - &design.phi_z * &state.beta_star
        - &design.phi_l * &state.b_star;
    let alpha = design.kf.solve_vector(&resid);
    Ok(ou_cross(&params.ou, query_times, &ind.times) * alpha)
}

/// Subtypes ranked by decreasing posterior probability; ties keep index
/// order.
pub fn rank_subtypes(state: &PosteriorState) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = state.pi_star.iter().cloned().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked
}

/// Posterior-predictive trajectory estimate with its component breakdown.
///
/// Query times beyond the spline boundary are clamped (with a warning)
/// rather than rejected; retrodiction before the observed history is
/// allowed.
pub fn predict_trajectory(
    params: &ModelParams,
    ind: &IndividualRecord,
    query_times: &[f64],
    mode: PredictionMode,
) -> Result<TrajectoryPrediction> {
    let state = infer_posterior(params, ind)?;

    let (phi_p_q, c1) = design_matrix_clamped(&params.basis_population, query_times);
    let (phi_z_q, c2) = design_matrix_clamped(&params.basis_subtype, query_times);
    let (phi_l_q, c3) = design_matrix_clamped(&params.basis_individual, query_times);
    if c1 + c2 + c3 > 0 {
        log::warn!(
            "{} query times clamped to the basis boundary",
            c1.max(c2).max(c3)
        );
    }

    let rho = params.population_coeffs(&ind.population_features)?;
    let population = &phi_p_q * rho;

    let (subpopulation, individual, noise) = match mode {
        PredictionMode::PosteriorMean => {
            let sub = &phi_z_q * &state.beta_star;
            let indiv = &phi_l_q * &state.b_star;
            let f = predict_structured_noise(params, ind, &state, query_times)?;
            (sub, indiv, f)
        }
        PredictionMode::MapSubtype => {
            let g_star = rank_subtypes(&state)[0].0;
            let beta_map = &params.subtype_coeffs[g_star];
            if ind.n_obs() == 0 {
                (
                    &phi_z_q * beta_map,
                    DVector::zeros(query_times.len()),
                    DVector::zeros(query_times.len()),
                )
            } else {
                let design = history_design(params, ind)?;
                let b_map = b_posterior_mean(&design, &state.sigma_b_star, beta_map);
                let resid = &design.y
                    - &design.population_mean
                    - &design.phi_z * beta_map
                    - &design.phi_l * &b_map;
                let alpha = design.kf.solve_vector(&resid);
                let f = ou_cross(&params.ou, query_times, &ind.times) * alpha;
                (&phi_z_q * beta_map, &phi_l_q * &b_map, f)
            }
        }
    };

    let predicted: Vec<f64> = (0..query_times.len())
        .map(|j| population[j] + subpopulation[j] + individual[j] + noise[j])
        .collect();
    Ok(TrajectoryPrediction {
        times: query_times.to_vec(),
        population: population.iter().cloned().collect(),
        subpopulation: subpopulation.iter().cloned().collect(),
        individual: individual.iter().cloned().collect(),
        noise: noise.iter().cloned().collect(),
        predicted,
        mode,
        ranked_subtypes: rank_subtypes(&state),
    })
}

/// Prior-weighted mean curve at the query times (no history), used for
/// prior-predictive displays.
pub fn prior_mean_curve(
    params: &ModelParams,
    ind: &IndividualRecord,
    query_times: &[f64],
) -> Result<DVector<f64>> {
    let prior = subtype_prior(params, &ind.subtype_features)?;
    let (phi_p_q, _) = design_matrix_clamped(&params.basis_population, query_times);
    let (phi_z_q, _) = design_matrix_clamped(&params.basis_subtype, query_times);
    let rho = params.population_coeffs(&ind.population_features)?;
    let mut beta_bar = DVector::zeros(params.basis_subtype.dim());
    for (g, beta) in params.subtype_coeffs.iter().enumerate() {
        beta_bar += beta * prior[g];
    }
    Ok(&phi_p_q * rho + &phi_z_q * beta_bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisConfig;
    use crate::kernels::{composite_covariance, composite_cross, NoiseParams, OuParams};
    use crate::model::mean_under_subtype;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn intercept(v: f64) -> DVector<f64> {
        DVector::from_vec(vec![v])
    }

    fn params(g: usize) -> ModelParams {
        ModelParams {
            num_subtypes: g,
            population_map: DMatrix::zeros(1, 1),
            subtype_weights: vec![DVector::zeros(1); g],
            subtype_coeffs: vec![DVector::zeros(5); g],
            random_effect_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![16.0, 0.01])),
            ou: OuParams::new(6.0, 2.0).unwrap(),
            noise: NoiseParams::new(1.0).unwrap(),
            basis_population: BasisConfig::polynomial(0),
            basis_subtype: BasisConfig::bspline_equally_spaced(0.0, 25.0, 2, 2),
            basis_individual: BasisConfig::polynomial(1),
        }
    }

    fn individual(times: Vec<f64>, values: Vec<f64>) -> IndividualRecord {
        IndividualRecord::new("p", times, values, intercept(1.0), intercept(1.0)).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, g: usize) -> ModelParams {
        let mut p = params(g);
        p.population_map = DMatrix::from_fn(1, 1, |_, _| rng.gen_range(-10.0..10.0));
        for k in 0..g {
            p.subtype_coeffs[k] = DVector::from_fn(5, |_, _| rng.gen_range(30.0..100.0));
            if k > 0 {
                p.subtype_weights[k] = DVector::from_fn(1, |_, _| rng.gen_range(-1.0..1.0));
            }
        }
        p
    }

    fn random_history(rng: &mut ChaCha8Rng, max_n: usize) -> IndividualRecord {
        let n = rng.gen_range(1..=max_n);
        let mut times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..22.0)).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(20.0..110.0)).collect();
        individual(times, values)
    }

    #[test]
    fn empty_history_gives_prior_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng, 3);
        let ind = individual(vec![], vec![]);
        let state = infer_posterior(&p, &ind).unwrap();
        assert_eq!(state.b_star, DVector::zeros(2));
        assert_eq!(state.sigma_b_star, p.random_effect_cov);
        let prior = subtype_prior(&p, &ind.subtype_features).unwrap();
        let mut expect = DVector::zeros(5);
        for g in 0..3 {
            expect += &p.subtype_coeffs[g] * prior[g];
        }
        assert!((state.beta_star - expect).amax() < 1e-12);
    }

    #[test]
    fn observation_on_the_mean_leaves_b_zero() {
        let mut p = params(1);
        p.subtype_coeffs[0] = DVector::from_element(5, 70.0);
        p.population_map = DMatrix::from_element(1, 1, 5.0);
        let ind = individual(vec![4.0], vec![75.0]);
        let state = infer_posterior(&p, &ind).unwrap();
        assert!(state.b_star.amax() < 1e-12);
    }

    #[test]
    fn b_star_matches_explicit_ridge_oracle() {
        // Independent small-matrix route: build the 2x2 posterior system
        // with explicit inverses and cofactor arithmetic only.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = random_params(&mut rng, 1);
            let ind = random_history(&mut rng, 4);
            let state = infer_posterior(&p, &ind).unwrap();

            let n = ind.n_obs();
            let phi_l = design_matrix(&p.basis_individual, &ind.times).unwrap();
            let kf = ou_gram_with_noise(&p.ou, &p.noise, &ind.times);
            let kf_inv = invert_oracle(&kf);
            let sb = &p.random_effect_cov;
            let det = sb[(0, 0)] * sb[(1, 1)] - sb[(0, 1)] * sb[(1, 0)];
            let sb_inv = DMatrix::from_row_slice(
                2,
                2,
                &[
                    sb[(1, 1)] / det,
                    -sb[(0, 1)] / det,
                    -sb[(1, 0)] / det,
                    sb[(0, 0)] / det,
                ],
            );
            let info = &sb_inv + phi_l.transpose() * &kf_inv * &phi_l;
            let info_inv = invert_oracle(&info);
            let mean = mean_under_subtype(&p, &ind, 0, &ind.times).unwrap();
            let resid = ind.values_vector() - mean;
            let b_oracle = &info_inv * (phi_l.transpose() * &kf_inv * resid);
            assert!(
                (state.b_star.clone() - b_oracle).amax() < 1e-8,
                "n={n}"
            );
            assert!((state.sigma_b_star.clone() - info_inv).amax() < 1e-8);
        }
    }

    /// Gauss-Jordan inversion written independently of the library path.
    fn invert_oracle(m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let mut a = m.clone();
        let mut inv = DMatrix::<f64>::identity(n, n);
        for col in 0..n {
            let mut pivot = col;
            for r in col + 1..n {
                if a[(r, col)].abs() > a[(pivot, col)].abs() {
                    pivot = r;
                }
            }
            a.swap_rows(col, pivot);
            inv.swap_rows(col, pivot);
            let d = a[(col, col)];
            for c in 0..n {
                a[(col, c)] /= d;
                inv[(col, c)] /= d;
            }
            for r in 0..n {
                if r != col {
                    let f = a[(r, col)];
                    for c in 0..n {
                        a[(r, c)] -= f * a[(col, c)];
                        inv[(r, c)] -= f * inv[(col, c)];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn structured_noise_empty_history_is_zero() {
        let p = params(2);
        let ind = individual(vec![], vec![]);
        let state = infer_posterior(&p, &ind).unwrap();
        let f = predict_structured_noise(&p, &ind, &state, &[1.0, 5.0]).unwrap();
        assert_eq!(f, DVector::zeros(2));
    }

    #[test]
    fn structured_noise_decays_far_from_observations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, 1);
        let ind = individual(vec![1.0, 2.0], vec![60.0, 55.0]);
        let state = infer_posterior(&p, &ind).unwrap();
        // ~25 length scales past the last observation
        let f = predict_structured_noise(&p, &ind, &state, &[52.0]).unwrap();
        assert!(f[0].abs() < 1e-6);
    }

    #[test]
    fn structured_noise_single_observation_closed_form() {
        // One observation, residual 7 at t0, queried at t0:
        // f* = r a^2 / (a^2 + sigma2) = 7 * 36 / 37.
        let p = params(1); // beta = 0, Lambda = 0
        let ind = individual(vec![6.0], vec![7.0]);
        let state = PosteriorState {
            pi_star: DVector::from_vec(vec![1.0]),
            beta_star: DVector::zeros(5),
            b_star: DVector::zeros(2),
            sigma_b_star: p.random_effect_cov.clone(),
            history_times: ind.times.clone(),
            history_values: ind.values.clone(),
        };
        let f = predict_structured_noise(&p, &ind, &state, &[6.0]).unwrap();
        assert_relative_eq!(f[0], 7.0 * 36.0 / 37.0, epsilon = 1e-12);
        assert_relative_eq!(f[0], 6.8108, epsilon = 1e-4);
    }

    #[test]
    fn modes_agree_for_single_subtype() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p = random_params(&mut rng, 1);
            let ind = random_history(&mut rng, 5);
            let q = [0.5, 8.0, 19.0];
            let a = predict_trajectory(&p, &ind, &q, PredictionMode::PosteriorMean).unwrap();
            let b = predict_trajectory(&p, &ind, &q, PredictionMode::MapSubtype).unwrap();
            for j in 0..q.len() {
                assert_relative_eq!(a.predicted[j], b.predicted[j], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn empty_history_prior_predictive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, 3);
        let ind = individual(vec![], vec![]);
        let q = [2.0, 10.0];
        let pred = predict_trajectory(&p, &ind, &q, PredictionMode::PosteriorMean).unwrap();
        let expect = prior_mean_curve(&p, &ind, &q).unwrap();
        for j in 0..2 {
            assert_relative_eq!(pred.predicted[j], expect[j], epsilon = 1e-12);
            assert_eq!(pred.individual[j], 0.0);
            assert_eq!(pred.noise[j], 0.0);
        }
    }

    #[test]
    fn decomposition_matches_joint_gaussian_conditioning() {
        // The central correctness property: for a single subtype the whole
        // update cascade equals direct conditioning of one joint Gaussian
        // built from the composite covariance over (history, query) times.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let p = random_params(&mut rng, 1);
            let ind = random_history(&mut rng, 6);
            let query: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..25.0)).collect();

            let pred =
                predict_trajectory(&p, &ind, &query, PredictionMode::PosteriorMean).unwrap();

            let mean_obs = mean_under_subtype(&p, &ind, 0, &ind.times).unwrap();
            let mean_query = mean_under_subtype(&p, &ind, 0, &query).unwrap();
            let k_obs = composite_covariance(
                &p.random_effect_cov,
                &p.basis_individual,
                &p.ou,
                &p.noise,
                &ind.times,
            )
            .unwrap();
            let k_cross = composite_cross(
                &p.random_effect_cov,
                &p.basis_individual,
                &p.ou,
                &query,
                &ind.times,
            )
            .unwrap();
            let resid = ind.values_vector() - mean_obs;
            let cond = mean_query + &k_cross * PdFactor::new(&k_obs).unwrap().solve_vector(&resid);
            for j in 0..query.len() {
                assert!(
                    (pred.predicted[j] - cond[j]).abs() < 1e-8,
                    "cascade {} vs conditioning {}",
                    pred.predicted[j],
                    cond[j]
                );
            }
        }
    }

    #[test]
    fn mixture_prediction_is_posterior_mix_of_conditioned_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let g = rng.gen_range(2..4);
            let p = random_params(&mut rng, g);
            let ind = random_history(&mut rng, 5);
            let query = [1.5, 9.0, 21.0];
            let pred =
                predict_trajectory(&p, &ind, &query, PredictionMode::PosteriorMean).unwrap();
            let state = infer_posterior(&p, &ind).unwrap();

            // Single-subtype pathway per component, mixed with posteriors.
            let mut mixed = vec![0.0; query.len()];
            for k in 0..g {
                let mut pk = p.clone();
                pk.num_subtypes = 1;
                pk.subtype_weights = vec![DVector::zeros(1)];
                pk.subtype_coeffs = vec![p.subtype_coeffs[k].clone()];
                let single =
                    predict_trajectory(&pk, &ind, &query, PredictionMode::PosteriorMean).unwrap();
                for j in 0..query.len() {
                    mixed[j] += state.pi_star[k] * single.predicted[j];
                }
            }
            for j in 0..query.len() {
                assert!(
                    (pred.predicted[j] - mixed[j]).abs() < 1e-8,
                    "mixture consistency failed: {} vs {}",
                    pred.predicted[j],
                    mixed[j]
                );
            }
        }
    }

    #[test]
    fn components_sum_to_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let g = rng.gen_range(1..4);
            let p = random_params(&mut rng, g);
            let ind = random_history(&mut rng, 6);
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..25.0)).collect();
            for mode in [PredictionMode::PosteriorMean, PredictionMode::MapSubtype] {
                let pred = predict_trajectory(&p, &ind, &q, mode).unwrap();
                for j in 0..q.len() {
                    let total = pred.population[j]
                        + pred.subpopulation[j]
                        + pred.individual[j]
                        + pred.noise[j];
                    assert!((total - pred.predicted[j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn new_observation_pulls_prediction_toward_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pulls = 0;
        let total = 100;
        for _ in 0..total {
            let p = random_params(&mut rng, 2);
            let ind = random_history(&mut rng, 4);
            let t0: f64 = rng.gen_range(0.0..22.0);
            let y0: f64 = rng.gen_range(20.0..110.0);
            let before = predict_trajectory(&p, &ind, &[t0], PredictionMode::PosteriorMean)
                .unwrap()
                .predicted[0];
            let mut times = ind.times.clone();
            let mut values = ind.values.clone();
            let pos = times.partition_point(|&t| t <= t0);
            times.insert(pos, t0);
            values.insert(pos, y0);
            let extended = individual(times, values);
            let after = predict_trajectory(&p, &extended, &[t0], PredictionMode::PosteriorMean)
                .unwrap()
                .predicted[0];
            if (after - y0).abs() <= (before - y0).abs() + 1e-12 {
                pulls += 1;
            }
        }
        assert_eq!(pulls, total, "every added observation must reduce the residual");
    }

    #[test]
    fn uncertainty_contracts_as_history_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let p = random_params(&mut rng, 1);
            let full = random_history(&mut rng, 6);
            let mut prev_trace = f64::INFINITY;
            for n in 0..=full.n_obs() {
                let partial = individual(full.times[..n].to_vec(), full.values[..n].to_vec());
                let state = infer_posterior(&p, &partial).unwrap();
                let tr = state.sigma_b_star.trace();
                assert!(tr <= prev_trace + 1e-10);
                prev_trace = tr;
            }
        }
    }

    #[test]
    fn prediction_invariant_to_observation_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = random_params(&mut rng, 2);
            let ind = random_history(&mut rng, 6);
            let n = ind.n_obs();
            let mut order: Vec<usize> = (0..n).collect();
            // Fisher-Yates shuffle
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            // bypass the sortedness invariant: the math must not care
            let shuffled = IndividualRecord {
                id: ind.id.clone(),
                times: order.iter().map(|&i| ind.times[i]).collect(),
                values: order.iter().map(|&i| ind.values[i]).collect(),
                population_features: ind.population_features.clone(),
                subtype_features: ind.subtype_features.clone(),
            };
            let q = [2.0, 12.0, 24.0];
            let a = predict_trajectory(&p, &ind, &q, PredictionMode::PosteriorMean).unwrap();
            let b = predict_trajectory(&p, &shuffled, &q, PredictionMode::PosteriorMean).unwrap();
            for j in 0..q.len() {
                assert!((a.predicted[j] - b.predicted[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sigma_b_star_contracts_the_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let p = random_params(&mut rng, 1);
            let ind = random_history(&mut rng, 6);
            let state = infer_posterior(&p, &ind).unwrap();
            let gap = &p.random_effect_cov - &state.sigma_b_star;
            let min_eig = gap
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert!(min_eig >= -1e-10, "posterior must contract the prior");
        }
    }

    #[test]
    fn rank_subtypes_ordering() {
        let state = PosteriorState {
            pi_star: DVector::from_vec(vec![0.2, 0.7, 0.1]),
            beta_star: DVector::zeros(5),
            b_star: DVector::zeros(2),
            sigma_b_star: DMatrix::identity(2, 2),
            history_times: vec![],
            history_values: vec![],
        };
        assert_eq!(rank_subtypes(&state), vec![(1, 0.7), (0, 0.2), (2, 0.1)]);
        let uniform = PosteriorState {
            pi_star: DVector::from_vec(vec![0.25; 4]),
            ..state
        };
        let ranked = rank_subtypes(&uniform);
        assert_eq!(
            ranked.iter().map(|r| r.0).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
    }
}

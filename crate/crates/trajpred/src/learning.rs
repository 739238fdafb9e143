//! Offline EM learning of the population map, subtype weights, and subtype
//! curves, with the covariance hyper-parameters held fixed, plus BIC
//! selection of the number of subtypes.
//!
//! The expected complete-data log-likelihood is concave in all of these
//! parameters; the M-step alternates closed-form weighted least-squares
//! solves for the curves and the population map (block coordinate ascent)
//! and gradient ascent for the multinomial weights.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, BasisConfig};
use crate::error::{Error, Result};
use crate::kernels::{NoiseParams, OuParams, PdFactor};
use crate::model::{
    log_sum_exp, mvn_logpdf_residual, softmax, subtype_prior, Dataset, IndividualRecord,
    ModelParams,
};

/// Covariance-side parameters held fixed during EM: the random-effect
/// covariance, the OU kernel, and the observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub random_effect_cov: DMatrix<f64>,
    pub ou: OuParams,
    pub noise: NoiseParams,
}

/// The three basis configurations of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub population: BasisConfig,
    pub subtype: BasisConfig,
    pub individual: BasisConfig,
}

impl BasisSet {
    /// Constant population basis, the quadratic five-dimensional subtype
    /// spline on [0, 25] years, and a linear individual basis.
    pub fn standard() -> Self {
        BasisSet {
            population: BasisConfig::polynomial(0),
            subtype: BasisConfig::bspline_equally_spaced(0.0, 25.0, 2, 2),
            individual: BasisConfig::polynomial(1),
        }
    }
}

/// EM configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop when the relative log-likelihood improvement falls below this.
    pub loglik_rel_tol: f64,
    /// Convergence threshold for the inner curve/map alternation.
    pub inner_tol: f64,
    pub max_inner_sweeps: usize,
    /// Gradient infinity-norm tolerance for the weight ascent.
    pub weight_grad_tol: f64,
    pub weight_max_steps: usize,
    pub random_restarts: usize,
    pub seed: u64,
    /// L2 penalty on the non-pinned multinomial weights.
    pub l2_weight_penalty: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 200,
            loglik_rel_tol: 1e-6,
            inner_tol: 1e-8,
            max_inner_sweeps: 50,
            weight_grad_tol: 1e-6,
            weight_max_steps: 500,
            random_restarts: 5,
            seed: 0,
            l2_weight_penalty: 1e-4,
        }
    }
}

/// Progress record of the winning restart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmTrace {
    /// Observed-data log-likelihood after each outer iteration; entry 0 is
    /// the initial parameter set.
    pub logliks: Vec<f64>,
    /// Infinity-norm of the parameter change per outer iteration.
    pub param_deltas: Vec<f64>,
    pub restart_index: usize,
    pub converged: bool,
    /// Subtypes whose normal-equation system needed the ridge fallback at
    /// the final iteration (near-zero total responsibility).
    pub starved_subtypes: Vec<usize>,
    /// Whether the weight ascent hit its gradient tolerance everywhere.
    pub weights_converged: bool,
}

/// Responsibility floor applied before M-step accumulation.
const RESPONSIBILITY_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Per-individual sufficient statistics
// ---------------------------------------------------------------------------

/// Quantities that stay fixed while EM runs: design matrices, the marginal
/// covariance factorization, and the weighted Gram blocks of the two
/// least-squares systems.
struct IndStats {
    n_obs: usize,
    y: DVector<f64>,
    /// Subtype design at the observation times.
    phi_z: DMatrix<f64>,
    /// Population design expanded against the features: column block `j`
    /// is `Phi_p * x_ip[j]`, so `psi * vec(Lambda) = Phi_p Lambda x_ip`.
    psi: DMatrix<f64>,
    factor: PdFactor,
    subtype_features: DVector<f64>,
    /// `Phi_z^T K^-1 Phi_z`
    g_zz: DMatrix<f64>,
    /// `Phi_z^T K^-1 psi`
    g_zp: DMatrix<f64>,
    /// `psi^T K^-1 psi`
    g_pp: DMatrix<f64>,
    /// `Phi_z^T K^-1 y`
    v_zy: DVector<f64>,
    /// `psi^T K^-1 y`
    v_py: DVector<f64>,
}

fn expand_population_design(phi_p: &DMatrix<f64>, x_ip: &DVector<f64>) -> DMatrix<f64> {
    let (n, d_p) = phi_p.shape();
    let q_p = x_ip.len();
    let mut psi = DMatrix::zeros(n, d_p * q_p);
    for j in 0..q_p {
        let mut block = psi.columns_mut(j * d_p, d_p);
        block.copy_from(&(phi_p * x_ip[j]));
    }
    psi
}

fn build_ind_stats(
    ind: &IndividualRecord,
    cov: &CovarianceParams,
    bases: &BasisSet,
) -> Result<IndStats> {
    let ctx = format!("individual {}", ind.id);
    let phi_p = design_matrix(&bases.population, &ind.times)
        .map_err(|e| e.with_context(&ctx))?;
    let phi_z = design_matrix(&bases.subtype, &ind.times).map_err(|e| e.with_context(&ctx))?;
    let psi = expand_population_design(&phi_p, &ind.population_features);
    let k = crate::kernels::composite_covariance(
        &cov.random_effect_cov,
        &bases.individual,
        &cov.ou,
        &cov.noise,
        &ind.times,
    )
    .map_err(|e| e.with_context(&ctx))?;
    let factor = PdFactor::new(&k).map_err(|e| e.with_context(&ctx))?;
    let y = ind.values_vector();
    let a_z = factor.solve_matrix(&phi_z);
    let a_p = factor.solve_matrix(&psi);
    Ok(IndStats {
        n_obs: ind.n_obs(),
        g_zz: phi_z.transpose() * &a_z,
        g_zp: phi_z.transpose() * &a_p,
        g_pp: psi.transpose() * &a_p,
        v_zy: a_z.transpose() * &y,
        v_py: a_p.transpose() * &y,
        y,
        phi_z,
        psi,
        factor,
        subtype_features: ind.subtype_features.clone(),
    })
}

// ---------------------------------------------------------------------------
// E-step
// ---------------------------------------------------------------------------

/// Posterior subtype probabilities for one individual. With no
/// observations this is the feature-conditional prior.
pub fn e_step(params: &ModelParams, ind: &IndividualRecord) -> Result<DVector<f64>> {
    match crate::model::per_subtype_log_joint(params, ind)? {
        None => subtype_prior(params, &ind.subtype_features),
        Some(terms) => Ok(DVector::from_vec(softmax(&terms))),
    }
}

struct EstepOut {
    posteriors: DMatrix<f64>,
    loglik: f64,
}

fn e_step_cached(stats: &[IndStats], state: &EmState) -> EstepOut {
    let g = state.betas.len();
    let rows: Vec<(Vec<f64>, f64)> = stats
        .par_iter()
        .map(|s| {
            let logits: Vec<f64> = state
                .weights
                .iter()
                .map(|w| w.dot(&s.subtype_features))
                .collect();
            let lse_prior = log_sum_exp(&logits);
            let pop = &s.psi * &state.vec_lambda;
            let joints: Vec<f64> = (0..g)
                .map(|k| {
                    let r = &s.y - &pop - &s.phi_z * &state.betas[k];
                    (logits[k] - lse_prior) + mvn_logpdf_residual(&s.factor, &r)
                })
                .collect();
            (softmax(&joints), log_sum_exp(&joints))
        })
        .collect();
    let mut posteriors = DMatrix::zeros(stats.len(), g);
    let mut loglik = 0.0;
    for (i, (p, ll)) in rows.iter().enumerate() {
        for k in 0..g {
            posteriors[(i, k)] = p[k];
        }
        // zero-observation individuals contribute log sum pi = 0
        loglik += if stats[i].n_obs == 0 { 0.0 } else { *ll };
    }
    EstepOut { posteriors, loglik }
}

// ---------------------------------------------------------------------------
// M-step: multinomial weights
// ---------------------------------------------------------------------------

fn weights_objective(
    weights: &[DVector<f64>],
    posteriors: &DMatrix<f64>,
    features: &[DVector<f64>],
    l2: f64,
) -> f64 {
    let g = weights.len();
    let mut obj = 0.0;
    for (i, x) in features.iter().enumerate() {
        let logits: Vec<f64> = weights.iter().map(|w| w.dot(x)).collect();
        let lse = log_sum_exp(&logits);
        for k in 0..g {
            obj += posteriors[(i, k)] * logits[k];
        }
        obj -= lse;
    }
    for w in weights.iter().skip(1) {
        obj -= l2 * w.norm_squared();
    }
    obj
}

fn weights_gradient(
    weights: &[DVector<f64>],
    posteriors: &DMatrix<f64>,
    features: &[DVector<f64>],
    l2: f64,
) -> Vec<DVector<f64>> {
    let g = weights.len();
    let q = weights[0].len();
    let mut grad = vec![DVector::zeros(q); g];
    for (i, x) in features.iter().enumerate() {
        let logits: Vec<f64> = weights.iter().map(|w| w.dot(x)).collect();
        let probs = softmax(&logits);
        for k in 1..g {
            grad[k] += x * (posteriors[(i, k)] - probs[k]);
        }
    }
    for k in 1..g {
        grad[k] -= &weights[k] * (2.0 * l2);
    }
    grad
}

/// Maximize the expected multinomial log-likelihood with an L2 penalty on
/// the non-pinned weights, by full-batch gradient ascent with backtracking.
/// The first weight vector stays zero. Returns the final weights and
/// whether the gradient tolerance was reached; the objective is concave,
/// so a `false` flag indicates step-size pathology only.
pub fn m_step_weights(
    posteriors: &DMatrix<f64>,
    features: &[DVector<f64>],
    l2: f64,
    init: &[DVector<f64>],
    grad_tol: f64,
    max_steps: usize,
) -> (Vec<DVector<f64>>, bool) {
    let mut w: Vec<DVector<f64>> = init.to_vec();
    let m = features.len().max(1);
    let mut step = 1.0 / m as f64;
    let mut obj = weights_objective(&w, posteriors, features, l2);
    for _ in 0..max_steps {
        let grad = weights_gradient(&w, posteriors, features, l2);
        let gnorm_inf = grad
            .iter()
            .map(|gk| gk.amax())
            .fold(0.0f64, f64::max);
        if gnorm_inf < grad_tol {
            return (w, true);
        }
        let gnorm_sq: f64 = grad.iter().map(|gk| gk.norm_squared()).sum();
        let mut accepted = false;
        while step >= 1e-14 {
            let trial: Vec<DVector<f64>> = w
                .iter()
                .zip(&grad)
                .map(|(wk, gk)| wk + gk * step)
                .collect();
            let trial_obj = weights_objective(&trial, posteriors, features, l2);
            if trial_obj >= obj + 1e-4 * step * gnorm_sq {
                w = trial;
                obj = trial_obj;
                accepted = true;
                step = (step * 2.0).min(1e4);
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return (w, false);
        }
    }
    (w, false)
}

// ---------------------------------------------------------------------------
// M-step: curves and the population map
// ---------------------------------------------------------------------------

fn solve_with_ridge_fallback(
    system: &DMatrix<f64>,
    rhs: &DVector<f64>,
) -> (DVector<f64>, bool) {
    match PdFactor::new(system) {
        Ok(f) => (f.solve_vector(rhs), false),
        Err(_) => {
            let d = system.nrows() as f64;
            let penalty = 1e-6 * system.trace() / d;
            let mut ridged = system.clone();
            for i in 0..system.nrows() {
                ridged[(i, i)] += penalty.max(1e-12);
            }
            let f = PdFactor::new(&ridged)
                .expect("ridged normal-equation system must factor");
            (f.solve_vector(rhs), true)
        }
    }
}

fn floored(p: f64) -> f64 {
    p.max(RESPONSIBILITY_FLOOR)
}

fn update_subtype_coeffs(
    stats: &[IndStats],
    posteriors: &DMatrix<f64>,
    vec_lambda: &DVector<f64>,
    d_z: usize,
    g: usize,
) -> (Vec<DVector<f64>>, Vec<usize>) {
    let mut betas = Vec::with_capacity(g);
    let mut starved = Vec::new();
    for k in 0..g {
        let mut system = DMatrix::zeros(d_z, d_z);
        let mut rhs = DVector::zeros(d_z);
        for (i, s) in stats.iter().enumerate() {
            let p = floored(posteriors[(i, k)]);
            system += &s.g_zz * p;
            rhs += (&s.v_zy - &s.g_zp * vec_lambda) * p;
        }
        let (beta, was_ridged) = solve_with_ridge_fallback(&system, &rhs);
        if was_ridged {
            starved.push(k);
        }
        betas.push(beta);
    }
    (betas, starved)
}

fn update_population_map(
    stats: &[IndStats],
    posteriors: &DMatrix<f64>,
    betas: &[DVector<f64>],
    pp_factor: &PopulationSystem,
) -> DVector<f64> {
    let dim = pp_factor.dim;
    let mut rhs = DVector::zeros(dim);
    for (i, s) in stats.iter().enumerate() {
        let mut beta_bar = DVector::zeros(betas[0].len());
        for (k, beta) in betas.iter().enumerate() {
            beta_bar += beta * floored(posteriors[(i, k)]);
        }
        rhs += &s.v_py - s.g_zp.transpose() * beta_bar;
    }
    pp_factor.solve(&rhs)
}

/// Pre-factored accumulated system for the population map; it does not
/// depend on the posteriors, so it is built once per fit.
struct PopulationSystem {
    factor: PdFactor,
    dim: usize,
}

impl PopulationSystem {
    fn new(stats: &[IndStats], dim: usize) -> Result<Self> {
        let mut system = DMatrix::zeros(dim, dim);
        for s in stats {
            system += &s.g_pp;
        }
        let factor = match PdFactor::new(&system) {
            Ok(f) => f,
            Err(_) => {
                let penalty = (1e-6 * system.trace() / dim as f64).max(1e-12);
                for i in 0..dim {
                    system[(i, i)] += penalty;
                }
                PdFactor::new(&system)?
            }
        };
        Ok(PopulationSystem { factor, dim })
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.factor.solve_vector(rhs)
    }
}

/// One closed-form update of the subtype curves given the current
/// population map; standalone entry point mirroring the internal step.
pub fn m_step_subtype_coeffs(
    params: &ModelParams,
    data: &Dataset,
    posteriors: &DMatrix<f64>,
) -> Result<(Vec<DVector<f64>>, Vec<usize>)> {
    let cov = CovarianceParams {
        random_effect_cov: params.random_effect_cov.clone(),
        ou: params.ou,
        noise: params.noise,
    };
    let bases = BasisSet {
        population: params.basis_population.clone(),
        subtype: params.basis_subtype.clone(),
        individual: params.basis_individual.clone(),
    };
    let stats = build_all_stats(data, &cov, &bases)?;
    let vec_lambda = vectorize(&params.population_map);
    Ok(update_subtype_coeffs(
        &stats,
        posteriors,
        &vec_lambda,
        params.basis_subtype.dim(),
        params.num_subtypes,
    ))
}

/// One closed-form update of the population map given the current curves.
pub fn m_step_population_map(
    params: &ModelParams,
    data: &Dataset,
    posteriors: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let cov = CovarianceParams {
        random_effect_cov: params.random_effect_cov.clone(),
        ou: params.ou,
        noise: params.noise,
    };
    let bases = BasisSet {
        population: params.basis_population.clone(),
        subtype: params.basis_subtype.clone(),
        individual: params.basis_individual.clone(),
    };
    let stats = build_all_stats(data, &cov, &bases)?;
    let dim = params.basis_population.dim() * params.population_map.ncols();
    let system = PopulationSystem::new(&stats, dim)?;
    let vec_lambda = update_population_map(&stats, posteriors, &params.subtype_coeffs, &system);
    Ok(unvectorize(
        &vec_lambda,
        params.basis_population.dim(),
        params.population_map.ncols(),
    ))
}

fn vectorize(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

fn unvectorize(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

fn build_all_stats(
    data: &Dataset,
    cov: &CovarianceParams,
    bases: &BasisSet,
) -> Result<Vec<IndStats>> {
    data.individuals
        .par_iter()
        .map(|ind| build_ind_stats(ind, cov, bases))
        .collect()
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

fn kmeans(points: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    assert!(!points.is_empty());
    let d = points[0].len();
    // k-means++ seeding
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..points.len())].clone());
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| (p - c).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.gen_range(0..points.len())
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centers.push(points[idx].clone());
    }
    // Lloyd iterations
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    (p - &centers[a])
                        .norm_squared()
                        .partial_cmp(&(p - &centers[b]).norm_squared())
                        .unwrap()
                })
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for c in 0..k {
            let members: Vec<&DVector<f64>> = points
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                centers[c] = points[rng.gen_range(0..points.len())].clone();
            } else {
                let mut mean = DVector::zeros(d);
                for p in &members {
                    mean += *p;
                }
                centers[c] = mean / members.len() as f64;
            }
        }
    }
    centers
}

/// Initial subtype curves: ridge-fit a per-individual spline to everyone
/// with at least three observations and cluster the coefficient vectors.
fn init_subtype_coeffs(
    data: &Dataset,
    stats: &[IndStats],
    d_z: usize,
    g: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DVector<f64>> {
    let mut points = Vec::new();
    for (ind, s) in data.individuals.iter().zip(stats) {
        if ind.n_obs() < 3 {
            continue;
        }
        let mut gram = s.phi_z.transpose() * &s.phi_z;
        for i in 0..d_z {
            gram[(i, i)] += 1e-3;
        }
        if let Ok(f) = PdFactor::new(&gram) {
            points.push(f.solve_vector(&(s.phi_z.transpose() * &s.y)));
        }
    }
    if points.is_empty() {
        // Degenerate data: start at the pooled mean level with tiny jitter.
        let all: Vec<f64> = data
            .individuals
            .iter()
            .flat_map(|i| i.values.iter().copied())
            .collect();
        let pooled = if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        };
        return (0..g)
            .map(|_| {
                DVector::from_fn(d_z, |_, _| {
                    pooled + rng.sample::<f64, _>(rand_distr::StandardNormal) * 1e-2
                })
            })
            .collect();
    }
    if points.len() < g {
        let base = points.clone();
        while points.len() < g {
            let p = &base[points.len() % base.len()];
            points.push(DVector::from_fn(d_z, |r, _| {
                p[r] + rng.sample::<f64, _>(rand_distr::StandardNormal) * 1e-2
            }));
        }
    }
    kmeans(&points, g, rng)
}

// ---------------------------------------------------------------------------
// The outer EM loop
// ---------------------------------------------------------------------------

struct EmState {
    betas: Vec<DVector<f64>>,
    vec_lambda: DVector<f64>,
    weights: Vec<DVector<f64>>,
}

struct EmRun {
    state: EmState,
    trace: EmTrace,
    final_loglik: f64,
}

fn run_em_once(
    data: &Dataset,
    stats: &[IndStats],
    pop_system: &PopulationSystem,
    g: usize,
    d_z: usize,
    q_z: usize,
    cfg: &EmConfig,
    restart: usize,
) -> Result<EmRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);

    let features: Vec<DVector<f64>> = data
        .individuals
        .iter()
        .map(|i| i.subtype_features.clone())
        .collect();

    let mut state = EmState {
        betas: init_subtype_coeffs(data, stats, d_z, g, &mut rng),
        vec_lambda: DVector::zeros(pop_system.dim),
        weights: vec![DVector::zeros(q_z); g],
    };

    let mut out = e_step_cached(stats, &state);
    let mut logliks = vec![out.loglik];
    let mut param_deltas = Vec::new();
    let mut converged = false;
    let mut starved_subtypes = Vec::new();
    let mut weights_converged = true;

    for _ in 0..cfg.max_iters {
        // (a) multinomial weights
        let (w_new, w_ok) = m_step_weights(
            &out.posteriors,
            &features,
            cfg.l2_weight_penalty,
            &state.weights,
            cfg.weight_grad_tol,
            cfg.weight_max_steps,
        );
        weights_converged = w_ok;
        if !w_ok {
            log::debug!("weight ascent stopped before gradient tolerance");
        }
        let mut delta = w_new
            .iter()
            .zip(&state.weights)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0f64, f64::max);
        state.weights = w_new;

        // (b) alternate curves and the population map to convergence
        starved_subtypes.clear();
        for _ in 0..cfg.max_inner_sweeps {
            let (betas_new, starved) =
                update_subtype_coeffs(stats, &out.posteriors, &state.vec_lambda, d_z, g);
            let lambda_new = update_population_map(stats, &out.posteriors, &betas_new, pop_system);
            let inner_delta = betas_new
                .iter()
                .zip(&state.betas)
                .map(|(a, b)| (a - b).amax())
                .fold((&lambda_new - &state.vec_lambda).amax(), f64::max);
            state.betas = betas_new;
            state.vec_lambda = lambda_new;
            starved_subtypes = starved;
            delta = delta.max(inner_delta);
            if inner_delta < cfg.inner_tol {
                break;
            }
        }
        param_deltas.push(delta);

        out = e_step_cached(stats, &state);
        let prev = *logliks.last().unwrap();
        logliks.push(out.loglik);
        if out.loglik < prev - 1e-8 {
            log::warn!(
                "log-likelihood decreased by {:.3e} in one EM step",
                prev - out.loglik
            );
        }
        let rel = (out.loglik - prev).abs() / prev.abs().max(1e-12);
        if rel < cfg.loglik_rel_tol {
            converged = true;
            break;
        }
    }

    if !weights_converged {
        log::warn!("restart {restart}: final weight ascent stopped before gradient tolerance");
    }
    let final_loglik = *logliks.last().unwrap();
    Ok(EmRun {
        state,
        trace: EmTrace {
            logliks,
            param_deltas,
            restart_index: restart,
            converged,
            starved_subtypes,
            weights_converged,
        },
        final_loglik,
    })
}

/// Fit the mean-side parameters by EM with random restarts, returning the
/// restart with the highest final observed-data log-likelihood.
pub fn fit_em(
    data: &Dataset,
    num_subtypes: usize,
    cov: &CovarianceParams,
    bases: &BasisSet,
    cfg: &EmConfig,
) -> Result<(ModelParams, EmTrace)> {
    if num_subtypes == 0 {
        return Err(Error::Parameter("need at least one subtype".into()));
    }
    if data.is_empty() {
        return Err(Error::Learning("cannot fit an empty dataset".into()));
    }
    data.validate()?;
    for b in [&bases.population, &bases.subtype, &bases.individual] {
        b.validate()?;
    }

    let d_p = bases.population.dim();
    let d_z = bases.subtype.dim();
    let q_p = data.individuals[0].population_features.len();
    let q_z = data.individuals[0].subtype_features.len();

    let stats = build_all_stats(data, cov, bases)?;
    let pop_system = PopulationSystem::new(&stats, d_p * q_p)?;

    let restarts = cfg.random_restarts.max(1);
    let mut best: Option<EmRun> = None;
    let mut last_err: Option<Error> = None;
    for r in 0..restarts {
        match run_em_once(data, &stats, &pop_system, num_subtypes, d_z, q_z, cfg, r) {
            Ok(run) => {
                let better = best
                    .as_ref()
                    .map(|b| run.final_loglik > b.final_loglik)
                    .unwrap_or(true);
                if better {
                    best = Some(run);
                }
            }
            Err(e) => {
                log::warn!("restart {r} aborted: {e}");
                last_err = Some(e);
            }
        }
    }
    let run = best.ok_or_else(|| {
        Error::Learning(format!(
            "all {restarts} restarts aborted; last error: {}",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        ))
    })?;

    let params = ModelParams {
        num_subtypes,
        population_map: unvectorize(&run.state.vec_lambda, d_p, q_p),
        subtype_weights: run.state.weights,
        subtype_coeffs: run.state.betas,
        random_effect_cov: cov.random_effect_cov.clone(),
        ou: cov.ou,
        noise: cov.noise,
        basis_population: bases.population.clone(),
        basis_subtype: bases.subtype.clone(),
        basis_individual: bases.individual.clone(),
    };
    params.validate()?;
    Ok((params, run.trace))
}

// ---------------------------------------------------------------------------
// BIC selection of the number of subtypes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRow {
    pub num_subtypes: usize,
    pub loglik: f64,
    pub bic: f64,
    pub free_params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubtypeSelection {
    pub rows: Vec<SelectionRow>,
    pub selected: usize,
}

/// Count of free mean-side parameters: the population map, the non-pinned
/// multinomial weights, and the subtype curves.
pub fn free_param_count(g: usize, d_p: usize, q_p: usize, d_z: usize, q_z: usize) -> usize {
    d_p * q_p + (g - 1) * q_z + g * d_z
}

/// Fit each candidate subtype count and score it with
/// `BIC = -2 loglik + k log(M)`, `M` being the number of individuals.
/// Ties break toward the smaller count.
pub fn select_num_subtypes(
    data: &Dataset,
    candidates: &[usize],
    cov: &CovarianceParams,
    bases: &BasisSet,
    cfg: &EmConfig,
) -> Result<SubtypeSelection> {
    if candidates.is_empty() {
        return Err(Error::Parameter("empty candidate range".into()));
    }
    let m = data.len() as f64;
    let d_p = bases.population.dim();
    let d_z = bases.subtype.dim();
    let q_p = data
        .individuals
        .first()
        .map(|i| i.population_features.len())
        .unwrap_or(1);
    let q_z = data
        .individuals
        .first()
        .map(|i| i.subtype_features.len())
        .unwrap_or(1);

    let mut rows = Vec::with_capacity(candidates.len());
    for &g in candidates {
        let (_, trace) = fit_em(data, g, cov, bases, cfg)?;
        let loglik = *trace.logliks.last().unwrap();
        let k = free_param_count(g, d_p, q_p, d_z, q_z);
        rows.push(SelectionRow {
            num_subtypes: g,
            loglik,
            bic: -2.0 * loglik + k as f64 * m.ln(),
            free_params: k,
        });
    }
    let mut selected = rows[0].num_subtypes;
    let mut best = rows[0].bic;
    for r in &rows[1..] {
        if r.bic < best {
            best = r.bic;
            selected = r.num_subtypes;
        }
    }
    Ok(SubtypeSelection { rows, selected })
}

// ---------------------------------------------------------------------------
// Diagnostics: the expected complete-data objective and its gradients
// ---------------------------------------------------------------------------

/// Expected complete-data log-likelihood under fixed posteriors, including
/// the weight penalty. Used to check M-step stationarity against finite
/// differences.
pub fn expected_complete_loglik(
    params: &ModelParams,
    data: &Dataset,
    posteriors: &DMatrix<f64>,
    l2: f64,
) -> Result<f64> {
    let cov = CovarianceParams {
        random_effect_cov: params.random_effect_cov.clone(),
        ou: params.ou,
        noise: params.noise,
    };
    let bases = BasisSet {
        population: params.basis_population.clone(),
        subtype: params.basis_subtype.clone(),
        individual: params.basis_individual.clone(),
    };
    let stats = build_all_stats(data, &cov, &bases)?;
    let vec_lambda = vectorize(&params.population_map);
    let mut q = 0.0;
    for (i, s) in stats.iter().enumerate() {
        let logits: Vec<f64> = params
            .subtype_weights
            .iter()
            .map(|w| w.dot(&s.subtype_features))
            .collect();
        let lse = log_sum_exp(&logits);
        let pop = &s.psi * &vec_lambda;
        for (k, beta) in params.subtype_coeffs.iter().enumerate() {
            let p = floored(posteriors[(i, k)]);
            let r = &s.y - &pop - &s.phi_z * beta;
            q += p * ((logits[k] - lse) + mvn_logpdf_residual(&s.factor, &r));
        }
    }
    for w in params.subtype_weights.iter().skip(1) {
        q -= l2 * w.norm_squared();
    }
    Ok(q)
}

/// Analytic gradients of [`expected_complete_loglik`] with respect to the
/// subtype curves, the population map, and the multinomial weights.
pub fn expected_complete_loglik_gradients(
    params: &ModelParams,
    data: &Dataset,
    posteriors: &DMatrix<f64>,
    l2: f64,
) -> Result<(Vec<DVector<f64>>, DMatrix<f64>, Vec<DVector<f64>>)> {
    let cov = CovarianceParams {
        random_effect_cov: params.random_effect_cov.clone(),
        ou: params.ou,
        noise: params.noise,
    };
    let bases = BasisSet {
        population: params.basis_population.clone(),
        subtype: params.basis_subtype.clone(),
        individual: params.basis_individual.clone(),
    };
    let stats = build_all_stats(data, &cov, &bases)?;
    let g = params.num_subtypes;
    let d_z = params.basis_subtype.dim();
    let vec_lambda = vectorize(&params.population_map);
    let dim_l = vec_lambda.len();

    let mut d_betas = vec![DVector::zeros(d_z); g];
    let mut d_lambda = DVector::zeros(dim_l);
    let q_z = params.subtype_weights[0].len();
    let mut d_weights = vec![DVector::zeros(q_z); g];

    for (i, s) in stats.iter().enumerate() {
        let logits: Vec<f64> = params
            .subtype_weights
            .iter()
            .map(|w| w.dot(&s.subtype_features))
            .collect();
        let probs = softmax(&logits);
        let pop = &s.psi * &vec_lambda;
        for (k, beta) in params.subtype_coeffs.iter().enumerate() {
            let p = floored(posteriors[(i, k)]);
            let r = &s.y - &pop - &s.phi_z * beta;
            let kr = s.factor.solve_vector(&r);
            d_betas[k] += s.phi_z.transpose() * &kr * p;
            d_lambda += s.psi.transpose() * &kr * p;
            if k >= 1 {
                d_weights[k] += &s.subtype_features * (p - probs[k]);
            }
        }
    }
    for k in 1..g {
        d_weights[k] -= &params.subtype_weights[k] * (2.0 * l2);
    }
    Ok((
        d_betas,
        unvectorize(&d_lambda, params.basis_population.dim(), params.population_map.ncols()),
        d_weights,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn intercept(v: f64) -> DVector<f64> {
        DVector::from_vec(vec![v])
    }

    fn paper_cov() -> CovarianceParams {
        CovarianceParams {
            random_effect_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![16.0, 0.01])),
            ou: OuParams::new(6.0, 2.0).unwrap(),
            noise: NoiseParams::new(1.0).unwrap(),
        }
    }

    /// Near-degenerate covariance: K approaches sigma2 * I.
    fn iid_cov(sigma2: f64) -> CovarianceParams {
        CovarianceParams {
            random_effect_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1e-12, 1e-12])),
            ou: OuParams::new(1e-6, 2.0).unwrap(),
            noise: NoiseParams::new(sigma2).unwrap(),
        }
    }

    fn params_from(
        g: usize,
        cov: &CovarianceParams,
        bases: &BasisSet,
        betas: Vec<DVector<f64>>,
        weights: Vec<DVector<f64>>,
        lambda: DMatrix<f64>,
    ) -> ModelParams {
        ModelParams {
            num_subtypes: g,
            population_map: lambda,
            subtype_weights: weights,
            subtype_coeffs: betas,
            random_effect_cov: cov.random_effect_cov.clone(),
            ou: cov.ou,
            noise: cov.noise,
            basis_population: bases.population.clone(),
            basis_subtype: bases.subtype.clone(),
            basis_individual: bases.individual.clone(),
        }
    }

    fn simple_individual(id: &str, times: Vec<f64>, values: Vec<f64>) -> IndividualRecord {
        IndividualRecord::new(id, times, values, intercept(1.0), intercept(1.0)).unwrap()
    }

    #[test]
    fn e_step_single_subtype() {
        let bases = BasisSet::standard();
        let cov = paper_cov();
        let p = params_from(
            1,
            &cov,
            &bases,
            vec![DVector::zeros(5)],
            vec![DVector::zeros(1)],
            DMatrix::zeros(1, 1),
        );
        let ind = simple_individual("a", vec![1.0, 2.0], vec![3.0, 4.0]);
        let post = e_step(&p, &ind).unwrap();
        assert_eq!(post.len(), 1);
        assert_relative_eq!(post[0], 1.0);
    }

    #[test]
    fn e_step_no_evidence_returns_prior() {
        let bases = BasisSet::standard();
        let cov = paper_cov();
        let mut weights = vec![DVector::zeros(1); 3];
        weights[1] = DVector::from_vec(vec![0.7]);
        weights[2] = DVector::from_vec(vec![-0.4]);
        let p = params_from(
            3,
            &cov,
            &bases,
            vec![DVector::zeros(5); 3],
            weights,
            DMatrix::zeros(1, 1),
        );
        let ind = simple_individual("a", vec![], vec![]);
        let post = e_step(&p, &ind).unwrap();
        let prior = subtype_prior(&p, &ind.subtype_features).unwrap();
        for k in 0..3 {
            assert_relative_eq!(post[k], prior[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn e_step_two_component_hand_oracle() {
        // Hand-normalized product of prior and explicitly evaluated
        // univariate Gaussian densities (one observation).
        let bases = BasisSet::standard();
        let cov = paper_cov();
        let betas = vec![DVector::from_element(5, 80.0), DVector::from_element(5, 50.0)];
        let mut weights = vec![DVector::zeros(1); 2];
        weights[1] = DVector::from_vec(vec![0.5]);
        let p = params_from(2, &cov, &bases, betas, weights, DMatrix::zeros(1, 1));
        let ind = simple_individual("a", vec![3.0], vec![70.0]);

        let prior = subtype_prior(&p, &ind.subtype_features).unwrap();
        let var = p.marginal_covariance(&ind.times).unwrap()[(0, 0)];
        let dens = |m: f64| {
            (-(70.0 - m) * (70.0 - m) / (2.0 * var)).exp()
                / (2.0 * std::f64::consts::PI * var).sqrt()
        };
        let joint = [prior[0] * dens(80.0), prior[1] * dens(50.0)];
        let z = joint[0] + joint[1];

        let post = e_step(&p, &ind).unwrap();
        assert_relative_eq!(post[0], joint[0] / z, epsilon = 1e-12);
        assert_relative_eq!(post[1], joint[1] / z, epsilon = 1e-12);
    }

    #[test]
    fn posterior_normalization_random_cases() {
        let bases = BasisSet::standard();
        let cov = paper_cov();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
            let g = rng.gen_range(1..5);
            let betas = (0..g)
                .map(|_| DVector::from_fn(5, |_, _| rng.gen_range(20.0..100.0)))
                .collect();
            let mut weights: Vec<DVector<f64>> = (0..g)
                .map(|_| DVector::from_fn(1, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            weights[0] = DVector::zeros(1);
            let p = params_from(g, &cov, &bases, betas, weights, DMatrix::zeros(1, 1));
            let n = rng.gen_range(1..6);
            let times: Vec<f64> = {
                let mut t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..22.0)).collect();
                t.sort_by(|a, b| a.partial_cmp(b).unwrap());
                t
            };
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(10.0..110.0)).collect();
            let ind = simple_individual("a", times, values);
            let post = e_step(&p, &ind).unwrap();
            assert_relative_eq!(post.sum(), 1.0, epsilon = 1e-12);
            assert!(post.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn weights_symmetric_posteriors_stay_near_zero() {
        let m = 40;
        let g = 3;
        let posteriors = DMatrix::from_element(m, g, 1.0 / g as f64);
        let features: Vec<DVector<f64>> = (0..m).map(|_| intercept(1.0)).collect();
        let init = vec![DVector::zeros(1); g];
        let (w, ok) = m_step_weights(&posteriors, &features, 1e-4, &init, 1e-8, 500);
        assert!(ok);
        for wk in &w {
            assert!(wk.amax() < 1e-6);
        }
    }

    #[test]
    fn weights_intercept_only_closed_form() {
        // Hard posteriors, 1 of class 1 and 2 of class 2, no penalty:
        // the optimum is w2 = log(n2/n1) = log 2.
        let mut posteriors = DMatrix::zeros(3, 2);
        posteriors[(0, 0)] = 1.0;
        posteriors[(1, 1)] = 1.0;
        posteriors[(2, 1)] = 1.0;
        let features: Vec<DVector<f64>> = (0..3).map(|_| intercept(1.0)).collect();
        let init = vec![DVector::zeros(1); 2];
        let (w, ok) = m_step_weights(&posteriors, &features, 0.0, &init, 1e-10, 2000);
        assert!(ok);
        assert_relative_eq!(w[1][0], 2.0f64.ln(), epsilon = 1e-6);
        // With a penalty the intercept shrinks toward zero.
        let (w_pen, _) = m_step_weights(&posteriors, &features, 0.1, &init, 1e-10, 2000);
        assert!(w_pen[1][0] < w[1][0] && w_pen[1][0] > 0.0);
    }

    #[test]
    fn weights_gradient_below_tolerance_at_return() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 30;
        let g = 3;
        let mut posteriors = DMatrix::zeros(m, g);
        for i in 0..m {
            let rowv: Vec<f64> = (0..g).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = rowv.iter().sum();
            for k in 0..g {
                posteriors[(i, k)] = rowv[k] / s;
            }
        }
        let features: Vec<DVector<f64>> = (0..m)
            .map(|_| DVector::from_vec(vec![1.0, rng.gen_range(0..2) as f64]))
            .collect();
        let init = vec![DVector::zeros(2); g];
        let (w, ok) = m_step_weights(&posteriors, &features, 1e-4, &init, 1e-6, 500);
        assert!(ok);
        let grad = weights_gradient(&w, &posteriors, &features, 1e-4);
        let gmax = grad.iter().map(|g| g.amax()).fold(0.0f64, f64::max);
        assert!(gmax < 1e-6, "gradient at return {gmax}");
    }

    #[test]
    fn curves_match_pooled_ols_oracle() {
        // Near-iid kernel, no population term: the curve update collapses
        // to ordinary least squares on the pooled observations.
        let bases = BasisSet::standard();
        let cov = iid_cov(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inds: Vec<IndividualRecord> = (0..20)
            .map(|i| {
                let n = rng.gen_range(3..8);
                let mut times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..22.0)).collect();
                times.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let values: Vec<f64> = times.iter().map(|&t| 80.0 - 1.5 * t).collect();
                simple_individual(&format!("p{i}"), times, values)
            })
            .collect();
        let data = Dataset::new(inds, Default::default()).unwrap();
        let p = params_from(
            1,
            &cov,
            &bases,
            vec![DVector::zeros(5)],
            vec![DVector::zeros(1)],
            DMatrix::zeros(1, 1),
        );
        let posteriors = DMatrix::from_element(data.len(), 1, 1.0);
        let (betas, starved) = m_step_subtype_coeffs(&p, &data, &posteriors).unwrap();
        assert!(starved.is_empty());

        // OLS oracle on pooled data
        let all_times: Vec<f64> = data
            .individuals
            .iter()
            .flat_map(|i| i.times.iter().copied())
            .collect();
        let all_y: Vec<f64> = data
            .individuals
            .iter()
            .flat_map(|i| i.values.iter().copied())
            .collect();
        let phi = design_matrix(&bases.subtype, &all_times).unwrap();
        let gram = phi.transpose() * &phi;
        let rhs = phi.transpose() * DVector::from_vec(all_y);
        let ols = PdFactor::new(&gram).unwrap().solve_vector(&rhs);
        assert!((betas[0].clone() - ols).amax() < 1e-4);
    }

    #[test]
    fn curves_interpolate_with_square_design() {
        // One individual with d_z observations at distinct times, hard
        // posterior, near-iid kernel: Phi_z beta must reproduce y.
        let bases = BasisSet::standard();
        let cov = iid_cov(1.0);
        let times = vec![1.0, 5.0, 9.0, 15.0, 23.0];
        let values = vec![80.0, 75.0, 66.0, 60.0, 55.0];
        let ind = simple_individual("p0", times.clone(), values.clone());
        let data = Dataset::new(vec![ind], Default::default()).unwrap();
        let p = params_from(
            1,
            &cov,
            &bases,
            vec![DVector::zeros(5)],
            vec![DVector::zeros(1)],
            DMatrix::zeros(1, 1),
        );
        let posteriors = DMatrix::from_element(1, 1, 1.0);
        let (betas, _) = m_step_subtype_coeffs(&p, &data, &posteriors).unwrap();
        let phi = design_matrix(&bases.subtype, &times).unwrap();
        let fitted = phi * &betas[0];
        for j in 0..5 {
            assert_relative_eq!(fitted[j], values[j], epsilon = 1e-5);
        }
    }

    #[test]
    fn population_map_grand_mean_oracle() {
        // Constant population basis, intercept-only features, zero curves,
        // near-iid kernel: Lambda is the grand mean of all marker values.
        let bases = BasisSet::standard();
        let cov = iid_cov(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inds: Vec<IndividualRecord> = (0..15)
            .map(|i| {
                let n = rng.gen_range(2..6);
                let times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..22.0)).collect();
                let mut times = times;
                times.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let values: Vec<f64> = (0..n).map(|_| rng.gen_range(40.0..100.0)).collect();
                simple_individual(&format!("p{i}"), times, values)
            })
            .collect();
        let data = Dataset::new(inds, Default::default()).unwrap();
        let p = params_from(
            1,
            &cov,
            &bases,
            vec![DVector::zeros(5)],
            vec![DVector::zeros(1)],
            DMatrix::zeros(1, 1),
        );
        let posteriors = DMatrix::from_element(data.len(), 1, 1.0);
        let lambda = m_step_population_map(&p, &data, &posteriors).unwrap();
        let all: Vec<f64> = data
            .individuals
            .iter()
            .flat_map(|i| i.values.iter().copied())
            .collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert_relative_eq!(lambda[(0, 0)], mean, epsilon = 1e-4);
    }

    #[test]
    fn population_map_fixed_point_on_exact_data() {
        // Data generated exactly by (Lambda0, beta): the update returns
        // Lambda0 regardless of the kernel.
        let bases = BasisSet::standard();
        let cov = paper_cov();
        let lambda0 = DMatrix::from_row_slice(1, 2, &[3.0, -5.0]);
        let beta = DVector::from_fn(5, |r, _| 70.0 - 4.0 * r as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let inds: Vec<IndividualRecord> = (0..12)
            .map(|i| {
                let n = rng.gen_range(2..7);
                let mut times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..22.0)).collect();
                times.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let bit = (i % 2) as f64;
                let x = DVector::from_vec(vec![1.0, bit]);
                let phi_z = design_matrix(&bases.subtype, &times).unwrap();
                let mean = phi_z * &beta;
                let values: Vec<f64> = times
                    .iter()
                    .enumerate()
                    .map(|(j, _)| mean[j] + 3.0 - 5.0 * bit)
                    .collect();
                IndividualRecord::new(format!("p{i}"), times, values, x, intercept(1.0)).unwrap()
            })
            .collect();
        let data = Dataset::new(inds, Default::default()).unwrap();
        let p = params_from(
            1,
            &cov,
            &bases,
            vec![beta],
            vec![DVector::zeros(1)],
            lambda0.clone(),
        );
        let posteriors = DMatrix::from_element(data.len(), 1, 1.0);
        let lambda = m_step_population_map(&p, &data, &posteriors).unwrap();
        assert!((lambda - lambda0).amax() < 1e-8);
    }

    #[test]
    fn m_step_returns_stationary_points() {
        // The analytic gradient at the returned curves/map is numerically
        // zero under the fixed posteriors.
        let bases = BasisSet::standard();
        let cov = paper_cov();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let inds: Vec<IndividualRecord> = (0..10)
            .map(|i| {
                let n = rng.gen_range(2..7);
                let mut times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..22.0)).collect();
                times.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let values: Vec<f64> = (0..n).map(|_| rng.gen_range(30.0..100.0)).collect();
                let x = DVector::from_vec(vec![1.0, (i % 2) as f64]);
                IndividualRecord::new(format!("p{i}"), times, values, x.clone(), x).unwrap()
            })
            .collect();
        let data = Dataset::new(inds, Default::default()).unwrap();
        let g = 2;
        let mut posteriors = DMatrix::zeros(data.len(), g);
        for i in 0..data.len() {
            let a = rng.gen_range(0.05..0.95);
            posteriors[(i, 0)] = a;
            posteriors[(i, 1)] = 1.0 - a;
        }
        let mut p = params_from(
            g,
            &cov,
            &bases,
            vec![DVector::zeros(5); g],
            vec![DVector::zeros(2); g],
            DMatrix::zeros(1, 2),
        );
        // Alternate the two closed-form updates until joint convergence.
        for _ in 0..200 {
            let (betas, _) = m_step_subtype_coeffs(&p, &data, &posteriors).unwrap();
            p.subtype_coeffs = betas;
            let lambda = m_step_population_map(&p, &data, &posteriors).unwrap();
            let delta = (&lambda - &p.population_map).amax();
            p.population_map = lambda;
            if delta < 1e-12 {
                break;
            }
        }
        let (d_betas, d_lambda, _) =
            expected_complete_loglik_gradients(&p, &data, &posteriors, 0.0).unwrap();
        for dk in &d_betas {
            assert!(dk.amax() < 1e-6, "curve gradient {}", dk.amax());
        }
        assert!(d_lambda.amax() < 1e-6, "map gradient {}", d_lambda.amax());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let bases = BasisSet::standard();
        let cov = paper_cov();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let inds: Vec<IndividualRecord> = (0..8)
            .map(|i| {
                let n = rng.gen_range(2..6);
                let mut times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..22.0)).collect();
                times.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let values: Vec<f64> = (0..n).map(|_| rng.gen_range(30.0..100.0)).collect();
                let x = DVector::from_vec(vec![1.0, (i % 2) as f64]);
                IndividualRecord::new(format!("p{i}"), times, values, x.clone(), x).unwrap()
            })
            .collect();
        let data = Dataset::new(inds, Default::default()).unwrap();
        let g = 2;
        let mut posteriors = DMatrix::zeros(data.len(), g);
        for i in 0..data.len() {
            let a = rng.gen_range(0.1..0.9);
            posteriors[(i, 0)] = a;
            posteriors[(i, 1)] = 1.0 - a;
        }
        let mut weights = vec![DVector::zeros(2); g];
        weights[1] = DVector::from_vec(vec![0.3, -0.2]);
        let p = params_from(
            g,
            &cov,
            &bases,
            vec![
                DVector::from_fn(5, |r, _| 60.0 + r as f64),
                DVector::from_fn(5, |r, _| 80.0 - 2.0 * r as f64),
            ],
            weights,
            DMatrix::from_row_slice(1, 2, &[1.0, -2.0]),
        );
        let l2 = 1e-4;
        let (d_betas, d_lambda, d_weights) =
            expected_complete_loglik_gradients(&p, &data, &posteriors, l2).unwrap();

        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64, label: &str| {
            let fd = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-3);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "{label}: analytic {analytic} vs fd {fd}"
            );
        };

        for k in 0..g {
            for r in 0..5 {
                let mut pp = p.clone();
                pp.subtype_coeffs[k][r] += h;
                let plus = expected_complete_loglik(&pp, &data, &posteriors, l2).unwrap();
                pp.subtype_coeffs[k][r] -= 2.0 * h;
                let minus = expected_complete_loglik(&pp, &data, &posteriors, l2).unwrap();
                check(d_betas[k][r], plus, minus, &format!("beta[{k}][{r}]"));
            }
        }
        for c in 0..2 {
            let mut pp = p.clone();
            pp.population_map[(0, c)] += h;
            let plus = expected_complete_loglik(&pp, &data, &posteriors, l2).unwrap();
            pp.population_map[(0, c)] -= 2.0 * h;
            let minus = expected_complete_loglik(&pp, &data, &posteriors, l2).unwrap();
            check(d_lambda[(0, c)], plus, minus, &format!("lambda[0,{c}]"));
        }
        for r in 0..2 {
            let mut pp = p.clone();
            pp.subtype_weights[1][r] += h;
            let plus = expected_complete_loglik(&pp, &data, &posteriors, l2).unwrap();
            pp.subtype_weights[1][r] -= 2.0 * h;
            let minus = expected_complete_loglik(&pp, &data, &posteriors, l2).unwrap();
            check(d_weights[1][r], plus, minus, &format!("w[1][{r}]"));
        }
    }

    #[test]
    fn relabeling_subtypes_preserves_loglik() {
        let bases = BasisSet::standard();
        let cov = paper_cov();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let betas: Vec<DVector<f64>> = (0..3)
            .map(|_| DVector::from_fn(5, |_, _| rng.gen_range(30.0..100.0)))
            .collect();
        let mut weights: Vec<DVector<f64>> = (0..3)
            .map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        weights[0] = DVector::zeros(2);
        let p = params_from(3, &cov, &bases, betas.clone(), weights.clone(), DMatrix::zeros(1, 2));

        // permutation (2, 0, 1); re-pin the new first class by subtracting
        // its weight vector from every class
        let perm = [2usize, 0, 1];
        let new_betas: Vec<DVector<f64>> = perm.iter().map(|&j| betas[j].clone()).collect();
        let base = weights[perm[0]].clone();
        let new_weights: Vec<DVector<f64>> =
            perm.iter().map(|&j| &weights[j] - &base).collect();
        let p2 = params_from(3, &cov, &bases, new_betas, new_weights, DMatrix::zeros(1, 2));

        let inds: Vec<IndividualRecord> = (0..10)
            .map(|i| {
                let n = rng.gen_range(1..6);
                let mut times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..22.0)).collect();
                times.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let values: Vec<f64> = (0..n).map(|_| rng.gen_range(20.0..110.0)).collect();
                let x = DVector::from_vec(vec![1.0, (i % 2) as f64]);
                IndividualRecord::new(format!("p{i}"), times, values, x.clone(), x).unwrap()
            })
            .collect();
        let data = Dataset::new(inds, Default::default()).unwrap();
        let a = crate::model::observed_data_loglik(&p, &data).unwrap();
        let b = crate::model::observed_data_loglik(&p2, &data).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-10);
    }

    #[test]
    fn bic_free_param_count_spot_check() {
        // d_p=1, q_p=4, G=9, q_z=4, d_z=6 -> 4 + 32 + 54 = 90
        assert_eq!(free_param_count(9, 1, 4, 6, 4), 90);
    }

    #[test]
    fn select_single_candidate() {
        let bases = BasisSet::standard();
        let cov = paper_cov();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inds: Vec<IndividualRecord> = (0..12)
            .map(|i| {
                let n = rng.gen_range(3..7);
                let mut times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..22.0)).collect();
                times.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let values: Vec<f64> = times.iter().map(|&t| 75.0 - t).collect();
                simple_individual(&format!("p{i}"), times, values)
            })
            .collect();
        let data = Dataset::new(inds, Default::default()).unwrap();
        let cfg = EmConfig {
            random_restarts: 1,
            max_iters: 30,
            ..Default::default()
        };
        let sel = select_num_subtypes(&data, &[1], &cov, &bases, &cfg).unwrap();
        assert_eq!(sel.selected, 1);
        assert_eq!(sel.rows.len(), 1);
    }
}

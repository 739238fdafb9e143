//! Synthetic-recovery checks: EM fits on data drawn from known parameters
//! must recover the subtype structure and the generative curves.

use nalgebra::{DMatrix, DVector};
use trajpred::basis::design_matrix;
use trajpred::learning::{e_step, fit_em, select_num_subtypes, BasisSet, CovarianceParams, EmConfig};
use trajpred::model::{Dataset, ModelParams};
use trajpred::simulate::{preset, sample_dataset, IndividualTruth};

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// MAP-subtype accuracy maximized over label permutations.
fn map_accuracy(params: &ModelParams, data: &Dataset, truth: &[IndividualTruth]) -> f64 {
    let g = params.num_subtypes;
    let map: Vec<usize> = data
        .individuals
        .iter()
        .map(|ind| {
            let post = e_step(params, ind).unwrap();
            (0..g).max_by(|&a, &b| post[a].partial_cmp(&post[b]).unwrap()).unwrap()
        })
        .collect();
    let mut best = 0.0f64;
    for perm in permutations(g) {
        let correct = map
            .iter()
            .zip(truth)
            .filter(|(&m, t)| perm[m] == t.subtype)
            .count();
        best = best.max(correct as f64 / truth.len() as f64);
    }
    best
}

/// Permutation with the best accuracy, for curve comparison.
fn best_permutation(params: &ModelParams, data: &Dataset, truth: &[IndividualTruth]) -> Vec<usize> {
    let g = params.num_subtypes;
    let map: Vec<usize> = data
        .individuals
        .iter()
        .map(|ind| {
            let post = e_step(params, ind).unwrap();
            (0..g).max_by(|&a, &b| post[a].partial_cmp(&post[b]).unwrap()).unwrap()
        })
        .collect();
    let mut best = (0usize, permutations(g)[0].clone());
    for perm in permutations(g) {
        let correct = map
            .iter()
            .zip(truth)
            .filter(|(&m, t)| perm[m] == t.subtype)
            .count();
        if correct > best.0 {
            best = (correct, perm);
        }
    }
    best.1
}

/// Mean curve at a reference covariate vector (intercept only, all binary
/// features zero): population intercept column plus the subtype curve.
fn reference_curve(params: &ModelParams, g: usize, grid: &[f64]) -> DVector<f64> {
    let phi_p = design_matrix(&params.basis_population, grid).unwrap();
    let phi_z = design_matrix(&params.basis_subtype, grid).unwrap();
    let q_p = params.population_map.ncols();
    let mut x_ref = DVector::zeros(q_p);
    x_ref[0] = 1.0;
    &phi_p * (&params.population_map * x_ref) + &phi_z * &params.subtype_coeffs[g]
}

fn mixed_data(m: usize, seed: u64) -> (trajpred::model::Dataset, Vec<IndividualTruth>, ModelParams) {
    let mut cfg = preset("mixed").unwrap().config;
    cfg.num_individuals = m;
    cfg.seed = seed;
    let (data, truth) = sample_dataset(&cfg).unwrap();
    (data, truth, cfg.params)
}

fn paper_cov() -> CovarianceParams {
    CovarianceParams {
        random_effect_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![16.0, 0.01])),
        ou: trajpred::kernels::OuParams::new(6.0, 2.0).unwrap(),
        noise: trajpred::kernels::NoiseParams::new(1.0).unwrap(),
    }
}

#[test]
fn single_subtype_curve_recovery() {
    let mut cfg = preset("rapid-decline").unwrap().config;
    cfg.num_individuals = 200;
    cfg.seed = 5;
    let (data, _) = sample_dataset(&cfg).unwrap();
    let em = EmConfig {
        random_restarts: 1,
        ..Default::default()
    };
    let (fitted, trace) = fit_em(&data, 1, &paper_cov(), &BasisSet::standard(), &em).unwrap();
    assert!(trace.logliks.len() >= 2);
    // recovered curve within 0.5 marker units pointwise on [0, 22]
    let grid: Vec<f64> = (0..=88).map(|k| k as f64 * 0.25).collect();
    let fit_curve = reference_curve(&fitted, 0, &grid);
    let true_curve = reference_curve(&cfg.params, 0, &grid);
    let max_err = (fit_curve - true_curve).amax();
    assert!(
        max_err < 0.5,
        "pointwise curve error {max_err} exceeds 0.5 marker units"
    );
}

#[test]
fn em_trace_is_monotone() {
    let (data, _, _) = mixed_data(150, 11);
    let em = EmConfig {
        random_restarts: 2,
        ..Default::default()
    };
    let (_, trace) = fit_em(&data, 3, &paper_cov(), &BasisSet::standard(), &em).unwrap();
    for w in trace.logliks.windows(2) {
        assert!(
            w[1] >= w[0] - 1e-8,
            "log-likelihood decreased: {} -> {}",
            w[0],
            w[1]
        );
    }
}

#[test]
fn three_subtype_recovery() {
    let (data, truth, truth_params) = mixed_data(500, 23);
    let em = EmConfig {
        random_restarts: 3,
        ..Default::default()
    };
    let (fitted, _) = fit_em(&data, 3, &paper_cov(), &BasisSet::standard(), &em).unwrap();
    let acc = map_accuracy(&fitted, &data, &truth);
    assert!(acc >= 0.95, "MAP accuracy {acc} below 0.95");

    let perm = best_permutation(&fitted, &data, &truth);
    let grid: Vec<f64> = (0..=88).map(|k| k as f64 * 0.25).collect();
    for fitted_g in 0..3 {
        let true_g = perm[fitted_g];
        let fit_curve = reference_curve(&fitted, fitted_g, &grid);
        let true_curve = reference_curve(&truth_params, true_g, &grid);
        let rms = ((fit_curve - true_curve).norm_squared() / grid.len() as f64).sqrt();
        assert!(
            rms < 1.0,
            "subtype {fitted_g} curve RMS {rms} above 1.0 marker units"
        );
    }
}

#[test]
fn correct_subtype_count_beats_smaller() {
    let (data, _, _) = mixed_data(300, 31);
    let em = EmConfig {
        random_restarts: 2,
        ..Default::default()
    };
    let cov = paper_cov();
    let bases = BasisSet::standard();
    let (_, t3) = fit_em(&data, 3, &cov, &bases, &em).unwrap();
    let (_, t2) = fit_em(&data, 2, &cov, &bases, &em).unwrap();
    assert!(t3.logliks.last().unwrap() > t2.logliks.last().unwrap());
}

#[test]
fn bic_selects_three_subtypes() {
    let (data, _, _) = mixed_data(300, 41);
    let em = EmConfig {
        random_restarts: 2,
        ..Default::default()
    };
    let sel = select_num_subtypes(&data, &[1, 2, 3, 4, 5, 6], &paper_cov(), &BasisSet::standard(), &em)
        .unwrap();
    // loglik must be non-decreasing in G up to restart noise
    for w in sel.rows.windows(2) {
        assert!(
            w[1].loglik >= w[0].loglik - 1e-3,
            "nested fits must not lose likelihood: G={} {} -> G={} {}",
            w[0].num_subtypes,
            w[0].loglik,
            w[1].num_subtypes,
            w[1].loglik
        );
    }
    assert_eq!(sel.selected, 3);
}

#[test]
fn fitted_loglik_within_band_of_truth() {
    // The fit must land within 0.5 nats per individual of the generative
    // parameters' likelihood (a local-optimum sanity band).
    let (data, _, truth_params) = mixed_data(300, 77);
    let em = EmConfig {
        random_restarts: 2,
        ..Default::default()
    };
    let (_, trace) = fit_em(&data, 3, &paper_cov(), &BasisSet::standard(), &em).unwrap();
    let fitted_ll = *trace.logliks.last().unwrap();
    let truth_ll = trajpred::model::observed_data_loglik(&truth_params, &data).unwrap();
    assert!(
        fitted_ll >= truth_ll - 0.5 * data.len() as f64,
        "fitted {fitted_ll} far below truth {truth_ll}"
    );
}

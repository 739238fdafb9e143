//! The dynamic-prediction evaluation protocol: observation cutoffs,
//! time-binned MAE against smoothed trajectories, individual-level
//! cross-validation, one-sided paired significance tests, and
//! decline-detection rates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::baselines::{FitContext, FittedTrajectoryModel, TrajectoryModel};
use crate::basis::{design_matrix, evaluate_basis_clamped, BasisConfig};
use crate::error::{Error, Result};
use crate::kernels::PdFactor;
use crate::model::{Dataset, IndividualRecord};

/// Settings of the evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Years of history made available before predicting.
    pub cutoffs: Vec<f64>,
    /// Half-open scoring intervals `(start, end]`.
    pub bins: Vec<(f64, f64)>,
    pub folds: usize,
    /// Basis the per-individual smoother fits on.
    pub smoother_basis: BasisConfig,
    /// Fixed log-spaced grid of smoother penalty weights.
    pub smoother_penalties: Vec<f64>,
    /// Marker drop that counts as a clinically relevant decline.
    pub decline_threshold: f64,
    /// History length used for decline detection.
    pub decline_cutoff: f64,
    /// Spacing of the query grid inside each bin.
    pub grid_step: f64,
    /// Score at observation times instead of the dense grid.
    pub error_at_observations_only: bool,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            cutoffs: vec![1.0, 2.0, 4.0],
            bins: vec![(1.0, 2.0), (2.0, 4.0), (4.0, 8.0), (8.0, 25.0)],
            folds: 10,
            smoother_basis: BasisConfig::bspline_equally_spaced(0.0, 25.0, 2, 2),
            smoother_penalties: vec![1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e1, 1e2, 1e4],
            decline_threshold: 10.0,
            decline_cutoff: 1.0,
            grid_step: 0.1,
            error_at_observations_only: false,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Parameter("need at least two folds".into()));
        }
        let mut prev_end = f64::NEG_INFINITY;
        for &(a, b) in &self.bins {
            if !(a < b) || a < prev_end {
                return Err(Error::Parameter(
                    "bins must be disjoint and increasing".into(),
                ));
            }
            prev_end = b;
        }
        if !(self.grid_step > 0.0) {
            return Err(Error::Parameter("grid step must be positive".into()));
        }
        if self.smoother_penalties.is_empty() {
            return Err(Error::Parameter("empty smoother penalty grid".into()));
        }
        Ok(())
    }

    /// Bins that may be scored at a given cutoff: `bin.start >= cutoff`.
    pub fn bins_for_cutoff(&self, cutoff: f64) -> Vec<(f64, f64)> {
        self.bins
            .iter()
            .cloned()
            .filter(|&(a, _)| a >= cutoff)
            .collect()
    }
}

fn bin_grid(bin: (f64, f64), step: f64) -> Vec<f64> {
    let mut grid = Vec::new();
    let mut k = 1usize;
    loop {
        let t = bin.0 + step * k as f64;
        if t > bin.1 + 1e-9 {
            break;
        }
        grid.push(t.min(bin.1));
        k += 1;
    }
    grid
}

// ---------------------------------------------------------------------------
// Per-individual smoother
// ---------------------------------------------------------------------------

/// Penalized spline fit of one individual's observations, usable as ground
/// truth over the whole evaluation window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothedTrajectory {
    pub basis: BasisConfig,
    pub coeffs: DVector<f64>,
    /// Penalty weight chosen by generalized cross-validation.
    pub penalty: f64,
}

impl SmoothedTrajectory {
    pub fn value(&self, t: f64) -> f64 {
        let (phi, _) = evaluate_basis_clamped(&self.basis, t);
        phi.dot(&self.coeffs)
    }
}

fn second_difference_matrix(d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d.saturating_sub(2), d);
    for r in 0..d.saturating_sub(2) {
        m[(r, r)] = 1.0;
        m[(r, r + 1)] = -2.0;
        m[(r, r + 2)] = 1.0;
    }
    m
}

/// Penalized least-squares spline through an individual's observations,
/// with a second-difference coefficient penalty whose weight is picked per
/// individual by GCV over the protocol's fixed grid. Needs at least two
/// observations.
pub fn smooth_trajectory(
    ind: &IndividualRecord,
    protocol: &EvalProtocol,
) -> Result<SmoothedTrajectory> {
    let n = ind.n_obs();
    if n < 2 {
        return Err(Error::Data(format!(
            "individual {}: smoother needs at least 2 observations, has {n}",
            ind.id
        )));
    }
    let basis = &protocol.smoother_basis;
    let d = basis.dim();
    let phi = design_matrix(basis, &ind.times)
        .map_err(|e| e.with_context(&format!("individual {}", ind.id)))?;
    let y = ind.values_vector();
    let gram = phi.transpose() * &phi;
    let penalty_gram = {
        let diff = second_difference_matrix(d);
        diff.transpose() * diff
    };
    let rhs = phi.transpose() * &y;

    let mut best: Option<(f64, f64, DVector<f64>)> = None; // (gcv, lambda, coeffs)
    for &lambda in &protocol.smoother_penalties {
        let a = &gram + &penalty_gram * lambda;
        let factor = match PdFactor::new(&a) {
            Ok(f) => f,
            Err(_) => continue,
        };
        let coeffs = factor.solve_vector(&rhs);
        let fitted = &phi * &coeffs;
        let rss = (&y - &fitted).norm_squared();
        let hat_trace = factor.solve_matrix(&gram).trace();
        let denom = n as f64 - hat_trace;
        if denom < 1e-6 {
            continue;
        }
        let gcv = n as f64 * rss / (denom * denom);
        if best.as_ref().map(|(g, _, _)| gcv < *g).unwrap_or(true) {
            best = Some((gcv, lambda, coeffs));
        }
    }
    let (_, penalty, coeffs) = best.ok_or_else(|| {
        Error::Numerical(format!(
            "individual {}: no smoother penalty produced a usable fit",
            ind.id
        ))
    })?;
    Ok(SmoothedTrajectory {
        basis: basis.clone(),
        coeffs,
        penalty,
    })
}

// ---------------------------------------------------------------------------
// Report structures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaeCell {
    pub model: String,
    pub cutoff: f64,
    pub bin: (f64, f64),
    pub mae: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedComparison {
    pub model_a: String,
    pub model_b: String,
    pub cutoff: f64,
    pub bin: (f64, f64),
    pub mean_diff: f64,
    /// `None` when the paired differences have zero variance or fewer than
    /// two pairs exist.
    pub t_stat: Option<f64>,
    /// One-sided p-value for the alternative "model_a < model_b".
    pub p_value: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRow {
    pub model: String,
    pub tpr: f64,
    pub fpr: f64,
    pub n_positive: usize,
    pub n_negative: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<MaeCell>,
    pub comparisons: Vec<PairedComparison>,
    pub detection: Vec<DetectionRow>,
    /// Individuals excluded from scoring, with reasons.
    pub excluded: Vec<(String, String)>,
    /// (fold, model, error) triples for fits that failed.
    pub fold_failures: Vec<(usize, String, String)>,
    /// Fold index of every individual, by dataset order.
    pub fold_assignment: Vec<usize>,
}

impl EvalReport {
    pub fn cell(&self, model: &str, cutoff: f64, bin: (f64, f64)) -> Option<&MaeCell> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.cutoff == cutoff && c.bin == bin)
    }

    pub fn comparison(
        &self,
        model_a: &str,
        model_b: &str,
        cutoff: f64,
        bin: (f64, f64),
    ) -> Option<&PairedComparison> {
        self.comparisons.iter().find(|c| {
            c.model_a == model_a && c.model_b == model_b && c.cutoff == cutoff && c.bin == bin
        })
    }
}

// ---------------------------------------------------------------------------
// Fold assignment
// ---------------------------------------------------------------------------

/// Seeded shuffle, then round-robin: every individual lands in exactly one
/// fold and fold sizes differ by at most one.
pub fn assign_folds(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut assignment = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = pos % folds;
    }
    assignment
}

// ---------------------------------------------------------------------------
// The harness
// ---------------------------------------------------------------------------

/// Per-individual prediction errors for one (model, cutoff, bin) cell.
struct ErrorRecord {
    individual: usize,
    model: usize,
    cutoff_idx: usize,
    bin_idx: usize,
    mean_abs_err: f64,
}

struct DetectionRecord {
    model: usize,
    truth: bool,
    predicted: bool,
}

/// Run the full protocol: cross-validated fits, binned MAE, paired
/// one-sided t-tests for every ordered model pair, and decline detection.
pub fn evaluate(
    models: &[&dyn TrajectoryModel],
    data: &Dataset,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    protocol.validate()?;
    if models.is_empty() {
        return Err(Error::Parameter("no models to evaluate".into()));
    }
    let n = data.len();
    let fold_assignment = assign_folds(n, protocol.folds, protocol.seed);

    // Smooth everyone once; individuals that cannot be smoothed are
    // excluded from all scoring.
    let mut excluded = Vec::new();
    let smoothed: Vec<Option<SmoothedTrajectory>> = data
        .individuals
        .iter()
        .map(|ind| match smooth_trajectory(ind, protocol) {
            Ok(s) => Some(s),
            Err(e) => {
                log::info!("excluding {}: {e}", ind.id);
                excluded.push((ind.id.clone(), e.to_string()));
                None
            }
        })
        .collect();

    let mut errors: Vec<ErrorRecord> = Vec::new();
    let mut detections: Vec<DetectionRecord> = Vec::new();
    let mut fold_failures = Vec::new();

    let detection_grid = bin_grid((protocol.decline_cutoff, 25.0), protocol.grid_step);

    for fold in 0..protocol.folds {
        let train = Dataset {
            individuals: data
                .individuals
                .iter()
                .enumerate()
                .filter(|(i, _)| fold_assignment[*i] != fold)
                .map(|(_, ind)| ind.clone())
                .collect(),
            meta: data.meta.clone(),
        };
        if train.is_empty() {
            continue;
        }
        let mut ctx = FitContext::default();
        let mut fitted: Vec<Option<Box<dyn FittedTrajectoryModel>>> = Vec::new();
        for m in models {
            match m.fit(&train, &mut ctx) {
                Ok(f) => fitted.push(Some(f)),
                Err(e) => {
                    log::warn!("fold {fold}: {} failed to fit: {e}", m.name());
                    fold_failures.push((fold, m.name(), e.to_string()));
                    fitted.push(None);
                }
            }
        }

        let test_idx: Vec<usize> = (0..n).filter(|&i| fold_assignment[i] == fold).collect();
        type IndOut = (Vec<ErrorRecord>, Vec<DetectionRecord>);
        let per_individual: Vec<Result<IndOut>> = test_idx
            .par_iter()
            .map(|&i| {
                let ind = &data.individuals[i];
                let smooth = match &smoothed[i] {
                    Some(s) => s,
                    None => return Ok((Vec::new(), Vec::new())),
                };
                let mut errs = Vec::new();
                let mut dets = Vec::new();
                for (ci, &cutoff) in protocol.cutoffs.iter().enumerate() {
                    let history = ind.history_up_to(cutoff);
                    let has_later = ind.times.iter().any(|&t| t > cutoff);
                    if !has_later {
                        continue;
                    }
                    for (mi, f) in fitted.iter().enumerate() {
                        let Some(f) = f else { continue };
                        for (bi, &bin) in protocol.bins.iter().enumerate() {
                            if bin.0 < cutoff {
                                continue;
                            }
                            let grid: Vec<f64> = if protocol.error_at_observations_only {
                                ind.times
                                    .iter()
                                    .cloned()
                                    .filter(|&t| t > bin.0 && t <= bin.1)
                                    .collect()
                            } else {
                                bin_grid(bin, protocol.grid_step)
                            };
                            if grid.is_empty() {
                                continue;
                            }
                            let pred = f.predict(&history, &grid)?;
                            let err = grid
                                .iter()
                                .zip(&pred)
                                .map(|(&t, &p)| (p - smooth.value(t)).abs())
                                .sum::<f64>()
                                / grid.len() as f64;
                            errs.push(ErrorRecord {
                                individual: i,
                                model: mi,
                                cutoff_idx: ci,
                                bin_idx: bi,
                                mean_abs_err: err,
                            });
                        }
                    }
                }
                // decline detection at its own cutoff
                let cutoff = protocol.decline_cutoff;
                if ind.times.iter().any(|&t| t > cutoff) {
                    let history = ind.history_up_to(cutoff);
                    let base = smooth.value(cutoff);
                    let min_truth = detection_grid
                        .iter()
                        .map(|&t| smooth.value(t))
                        .fold(f64::INFINITY, f64::min);
                    let truth = base - min_truth > protocol.decline_threshold;
                    for (mi, f) in fitted.iter().enumerate() {
                        let Some(f) = f else { continue };
                        let pred = f.predict(&history, &detection_grid)?;
                        let pred_base = f.predict(&history, &[cutoff])?[0];
                        let pred_min = pred.iter().cloned().fold(f64::INFINITY, f64::min);
                        dets.push(DetectionRecord {
                            model: mi,
                            truth,
                            predicted: pred_base - pred_min > protocol.decline_threshold,
                        });
                    }
                }
                Ok((errs, dets))
            })
            .collect();
        for r in per_individual {
            let (errs, dets) = r?;
            errors.extend(errs);
            detections.extend(dets);
        }
    }

    // MAE cells
    let mut cells = Vec::new();
    for (mi, m) in models.iter().enumerate() {
        for (ci, &cutoff) in protocol.cutoffs.iter().enumerate() {
            for (bi, &bin) in protocol.bins.iter().enumerate() {
                if bin.0 < cutoff {
                    continue;
                }
                let cell_errs: Vec<f64> = errors
                    .iter()
                    .filter(|e| e.model == mi && e.cutoff_idx == ci && e.bin_idx == bi)
                    .map(|e| e.mean_abs_err)
                    .collect();
                if cell_errs.is_empty() {
                    continue;
                }
                cells.push(MaeCell {
                    model: m.name(),
                    cutoff,
                    bin,
                    mae: cell_errs.iter().sum::<f64>() / cell_errs.len() as f64,
                    n: cell_errs.len(),
                });
            }
        }
    }

    // paired one-sided t-tests for every ordered model pair
    let mut comparisons = Vec::new();
    for (ci, &cutoff) in protocol.cutoffs.iter().enumerate() {
        for (bi, &bin) in protocol.bins.iter().enumerate() {
            if bin.0 < cutoff {
                continue;
            }
            for a in 0..models.len() {
                for b in 0..models.len() {
                    if a == b {
                        continue;
                    }
                    let mut paired: Vec<(usize, f64)> = Vec::new(); // individual -> err_a
                    let mut diffs = Vec::new();
                    for e in errors
                        .iter()
                        .filter(|e| e.model == a && e.cutoff_idx == ci && e.bin_idx == bi)
                    {
                        paired.push((e.individual, e.mean_abs_err));
                    }
                    for (ind, err_a) in paired {
                        if let Some(e_b) = errors.iter().find(|e| {
                            e.model == b
                                && e.cutoff_idx == ci
                                && e.bin_idx == bi
                                && e.individual == ind
                        }) {
                            diffs.push(err_a - e_b.mean_abs_err);
                        }
                    }
                    let n = diffs.len();
                    let (mean_diff, t_stat, p_value) = paired_t_one_sided(&diffs);
                    comparisons.push(PairedComparison {
                        model_a: models[a].name(),
                        model_b: models[b].name(),
                        cutoff,
                        bin,
                        mean_diff,
                        t_stat,
                        p_value,
                        n,
                    });
                }
            }
        }
    }

    // detection rates
    let mut detection = Vec::new();
    for (mi, m) in models.iter().enumerate() {
        let rows: Vec<&DetectionRecord> =
            detections.iter().filter(|d| d.model == mi).collect();
        let n_positive = rows.iter().filter(|d| d.truth).count();
        let n_negative = rows.len() - n_positive;
        let tp = rows.iter().filter(|d| d.truth && d.predicted).count();
        let fp = rows.iter().filter(|d| !d.truth && d.predicted).count();
        detection.push(DetectionRow {
            model: m.name(),
            tpr: if n_positive > 0 {
                tp as f64 / n_positive as f64
            } else {
                f64::NAN
            },
            fpr: if n_negative > 0 {
                fp as f64 / n_negative as f64
            } else {
                f64::NAN
            },
            n_positive,
            n_negative,
        });
    }

    Ok(EvalReport {
        cells,
        comparisons,
        detection,
        excluded,
        fold_failures,
        fold_assignment,
    })
}

/// Decline-detection rates only; runs the same protocol.
pub fn decline_detection(
    models: &[&dyn TrajectoryModel],
    data: &Dataset,
    protocol: &EvalProtocol,
) -> Result<Vec<DetectionRow>> {
    Ok(evaluate(models, data, protocol)?.detection)
}

/// Mean difference, t statistic, and one-sided p-value (alternative:
/// mean difference < 0) of paired differences. Degenerate inputs (fewer
/// than two pairs, zero variance) yield `None`.
fn paired_t_one_sided(diffs: &[f64]) -> (f64, Option<f64>, Option<f64>) {
    let n = diffs.len();
    if n == 0 {
        return (f64::NAN, None, None);
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None, None);
    }
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var <= 1e-24 {
        return (mean, None, None);
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof");
    (mean, Some(t), Some(dist.cdf(t)))
}

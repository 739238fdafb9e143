//! Command-line interface: simulate synthetic cohorts, fit models, make
//! dynamic predictions, run the evaluation protocol, and select the
//! subtype count by BIC.
//!
//! Exit codes: 0 success, 2 input/parse errors, 3 numerical failures,
//! 4 failed lookups (unknown id or preset).

mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};

use trajpred::baselines::{
    fit_bspline_features, fit_bspline_gp, fit_no_personalization, BsplineFeaturesSpec,
    BsplineGpSpec, FullModelSpec, NoPersonalizationSpec, ReducedCovariance, TrajectoryModel,
};
use trajpred::basis::{design_matrix_clamped, BasisConfig};
use trajpred::error::{Error, Result};
use trajpred::evaluation::{evaluate, EvalProtocol};
use trajpred::files::{
    format_report_table, load_model, read_dataset, save_model, write_dataset, write_prediction_csv,
    write_prediction_json, write_report, write_selection, write_trace, write_truth, ModelFile,
    ModelFileBody, TrainingMeta, MODEL_FORMAT_VERSION,
};
use trajpred::learning::{
    fit_em, free_param_count, select_num_subtypes, BasisSet, CovarianceParams, EmConfig,
};
use trajpred::model::IndividualRecord;
use trajpred::prediction::{predict_trajectory, PredictionMode, TrajectoryPrediction};
use trajpred::simulate::{preset, sample_dataset, scenario_presets};

use config::{parse_bins, parse_f64_list, FileConfig};

#[derive(Parser)]
#[command(name = "trajpred", version, about = "Individualized clinical-marker trajectory prediction")]
struct Cli {
    /// Cap the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Flat key-value config file (CLI flags take precedence).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic cohort from a named scenario.
    Simulate(SimulateArgs),
    /// Learn model parameters from data and write a model file.
    Fit(FitArgs),
    /// Predict an individual's trajectory from a partial history.
    Predict(PredictArgs),
    /// Run the cross-validated dynamic-prediction protocol.
    Evaluate(EvaluateArgs),
    /// Score candidate subtype counts with BIC.
    Select(SelectArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Observations CSV (id,time,value).
    #[arg(long)]
    observations: PathBuf,
    /// Features CSV (id,<binary features...>).
    #[arg(long)]
    features: PathBuf,
}

#[derive(Args, Clone)]
struct ModelFlags {
    /// Number of subtypes G.
    #[arg(long)]
    num_subtypes: Option<usize>,
    /// Diagonal of the random-effect covariance, e.g. "16,0.01".
    #[arg(long)]
    sigma_b: Option<String>,
    #[arg(long)]
    ou_amplitude: Option<f64>,
    #[arg(long)]
    ou_length_scale: Option<f64>,
    #[arg(long)]
    noise_variance: Option<f64>,
    /// Boundary knots of the subtype spline, e.g. "0,25".
    #[arg(long)]
    boundary: Option<String>,
    /// Explicit interior knots (comma list). Overrides --num-interior-knots.
    #[arg(long)]
    interior_knots: Option<String>,
    /// Number of equally spaced interior knots.
    #[arg(long)]
    num_interior_knots: Option<usize>,
    #[arg(long)]
    subtype_degree: Option<usize>,
    /// Polynomial degree of the population basis (0 = intercept shifts).
    #[arg(long)]
    population_degree: Option<usize>,
    /// Polynomial degree of the individual basis (1 = intercept + slope).
    #[arg(long)]
    individual_degree: Option<usize>,
}

#[derive(Args, Clone)]
struct EmFlags {
    #[arg(long)]
    max_iters: Option<usize>,
    /// Relative log-likelihood improvement below which EM stops.
    #[arg(long)]
    loglik_tol: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    l2_weight_penalty: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario name; see --list.
    #[arg(long)]
    preset: Option<String>,
    /// Print the available scenarios and exit.
    #[arg(long)]
    list: bool,
    #[arg(long)]
    num_individuals: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for observations.csv, features.csv, truth.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    em: EmFlags,
    /// Covariance-candidate grid, e.g.
    /// "a=4,l=1,s2=1;a=6,l=2,s2=1,sb=16:0.01"; the best candidate by
    /// observed-data log-likelihood is kept.
    #[arg(long)]
    grid: Option<String>,
    /// Which model kind to fit and save.
    #[arg(long, value_enum, default_value_t = FitKind::Full)]
    kind: FitKind,
    /// Output model file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Optional EM trace CSV (iteration, loglik).
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FitKind {
    Full,
    BsplineFeatures,
    BsplineGp,
    NoPersonalization,
}

#[derive(Args)]
struct PredictArgs {
    /// Model file produced by `fit`.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Individual id to predict for.
    #[arg(long)]
    id: String,
    /// Use only observations with time <= cutoff (years). Omit for all.
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long)]
    grid_start: Option<f64>,
    #[arg(long)]
    grid_end: Option<f64>,
    #[arg(long)]
    grid_step: Option<f64>,
    /// Explicit query times (comma list); overrides the grid flags.
    #[arg(long)]
    query_times: Option<String>,
    #[arg(long, value_enum, default_value_t = ModeArg::Map)]
    mode: ModeArg,
    /// Output CSV path; stdout when omitted and no --json-out given.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional JSON output with the ranked subtype list.
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Most likely subtype (the display/evaluation mode).
    Map,
    /// Posterior-weighted mean over subtypes.
    Mean,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    em: EmFlags,
    /// Comma list among: full, bspline-features, bspline-gp,
    /// no-personalization.
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    cutoffs: Option<String>,
    /// Scoring bins as start:end pairs, e.g. "1:2,2:4,4:8,8:25".
    #[arg(long)]
    bins: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    decline_threshold: Option<f64>,
    #[arg(long)]
    decline_cutoff: Option<f64>,
    #[arg(long)]
    grid_step: Option<f64>,
    /// Score at observation times instead of the dense grid.
    #[arg(long)]
    observations_only: bool,
    #[arg(long)]
    eval_seed: Option<u64>,
    /// Keep the OU term in the reduced mixture's covariance.
    #[arg(long)]
    reduced_with_ou: bool,
    /// Directory for mae.csv, comparisons.csv, detection.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    em: EmFlags,
    #[arg(long)]
    g_min: Option<usize>,
    #[arg(long)]
    g_max: Option<usize>,
    /// Explicit candidate list; overrides --g-min/--g-max.
    #[arg(long)]
    g_values: Option<String>,
    /// Output CSV for the BIC table.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    std::process::exit(code);
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Data(_) | Error::Parameter(_) | Error::Domain(_) | Error::Io(_) => 2,
        Error::Numerical(_) | Error::Learning(_) => 3,
        Error::NotFound(_) => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args, &cfg),
        Command::Fit(args) => cmd_fit(args, &cfg),
        Command::Predict(args) => cmd_predict(args, &cfg),
        Command::Evaluate(args) => cmd_evaluate(args, &cfg),
        Command::Select(args) => cmd_select(args, &cfg),
    }
}

// ---------------------------------------------------------------------------
// Flag resolution
// ---------------------------------------------------------------------------

fn covariance_from(flags: &ModelFlags, cfg: &FileConfig) -> Result<CovarianceParams> {
    let sigma_b = cfg.resolve_opt(flags.sigma_b.clone(), "sigma-b");
    let diag = match sigma_b {
        Some(raw) => parse_f64_list(&raw, "--sigma-b")?,
        None => vec![16.0, 0.01],
    };
    let amplitude = cfg.resolve(flags.ou_amplitude, "ou-amplitude", 6.0)?;
    let length_scale = cfg.resolve(flags.ou_length_scale, "ou-length-scale", 2.0)?;
    let sigma2 = cfg.resolve(flags.noise_variance, "noise-variance", 1.0)?;
    Ok(CovarianceParams {
        random_effect_cov: DMatrix::from_diagonal(&DVector::from_vec(diag)),
        ou: trajpred::kernels::OuParams::new(amplitude, length_scale)?,
        noise: trajpred::kernels::NoiseParams::new(sigma2)?,
    })
}

fn bases_from(flags: &ModelFlags, cfg: &FileConfig) -> Result<BasisSet> {
    let boundary = cfg.resolve_opt(flags.boundary.clone(), "boundary");
    let (lo, hi) = match boundary {
        Some(raw) => {
            let v = parse_f64_list(&raw, "--boundary")?;
            if v.len() != 2 {
                return Err(Error::Data("--boundary needs exactly two values".into()));
            }
            (v[0], v[1])
        }
        None => (0.0, 25.0),
    };
    let degree = cfg.resolve(flags.subtype_degree, "subtype-degree", 2)?;
    let interior = cfg.resolve_opt(flags.interior_knots.clone(), "interior-knots");
    let subtype = match interior {
        Some(raw) => BasisConfig::Bspline {
            boundary_knots: (lo, hi),
            interior_knots: parse_f64_list(&raw, "--interior-knots")?,
            degree,
        },
        None => {
            let n = cfg.resolve(flags.num_interior_knots, "num-interior-knots", 2)?;
            BasisConfig::bspline_equally_spaced(lo, hi, n, degree)
        }
    };
    subtype.validate()?;
    let population =
        BasisConfig::polynomial(cfg.resolve(flags.population_degree, "population-degree", 0)?);
    let individual =
        BasisConfig::polynomial(cfg.resolve(flags.individual_degree, "individual-degree", 1)?);
    Ok(BasisSet {
        population,
        subtype,
        individual,
    })
}

fn em_from(flags: &EmFlags, cfg: &FileConfig) -> Result<EmConfig> {
    let d = EmConfig::default();
    Ok(EmConfig {
        max_iters: cfg.resolve(flags.max_iters, "max-iters", d.max_iters)?,
        loglik_rel_tol: cfg.resolve(flags.loglik_tol, "loglik-tol", d.loglik_rel_tol)?,
        random_restarts: cfg.resolve(flags.restarts, "restarts", d.random_restarts)?,
        seed: cfg.resolve(flags.seed, "seed", d.seed)?,
        l2_weight_penalty: cfg.resolve(
            flags.l2_weight_penalty,
            "l2-weight-penalty",
            d.l2_weight_penalty,
        )?,
        ..d
    })
}

/// Parse one grid candidate like "a=6,l=2,s2=1,sb=16:0.01", filling
/// unspecified fields from the base covariance.
fn grid_candidate(raw: &str, base: &CovarianceParams) -> Result<CovarianceParams> {
    let mut out = base.clone();
    for part in raw.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("grid entry '{part}' must be key=value")))?;
        match key.trim() {
            "a" => {
                out.ou = trajpred::kernels::OuParams::new(
                    value.trim().parse().map_err(|_| {
                        Error::Data(format!("grid amplitude '{value}'"))
                    })?,
                    out.ou.length_scale,
                )?
            }
            "l" => {
                out.ou = trajpred::kernels::OuParams::new(
                    out.ou.amplitude,
                    value.trim().parse().map_err(|_| {
                        Error::Data(format!("grid length scale '{value}'"))
                    })?,
                )?
            }
            "s2" => {
                out.noise = trajpred::kernels::NoiseParams::new(value.trim().parse().map_err(
                    |_| Error::Data(format!("grid noise variance '{value}'")),
                )?)?
            }
            "sb" => {
                let diag: Result<Vec<f64>> = value
                    .split(':')
                    .map(|s| {
                        s.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Data(format!("grid sb entry '{s}'")))
                    })
                    .collect();
                out.random_effect_cov = DMatrix::from_diagonal(&DVector::from_vec(diag?));
            }
            other => {
                return Err(Error::Data(format!(
                    "unknown grid key '{other}' (expected a, l, s2, sb)"
                )))
            }
        }
    }
    Ok(out)
}

fn describe_covariance(cov: &CovarianceParams) -> String {
    let diag: Vec<String> = (0..cov.random_effect_cov.nrows())
        .map(|i| format!("{}", cov.random_effect_cov[(i, i)]))
        .collect();
    format!(
        "a={} l={} s2={} sb={}",
        cov.ou.amplitude,
        cov.ou.length_scale,
        cov.noise.sigma2,
        diag.join(":")
    )
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_simulate(args: SimulateArgs, cfg: &FileConfig) -> Result<()> {
    if args.list {
        for p in scenario_presets() {
            println!("{:<16} {}", p.name, p.description);
        }
        return Ok(());
    }
    let name = cfg
        .resolve_opt(args.preset.clone(), "preset")
        .ok_or_else(|| Error::Data("--preset is required (or use --list)".into()))?;
    let out_dir = args
        .out_dir
        .ok_or_else(|| Error::Data("--out-dir is required".into()))?;
    let mut sim = preset(&name)?.config;
    sim.num_individuals = cfg.resolve(args.num_individuals, "num-individuals", sim.num_individuals)?;
    sim.seed = cfg.resolve(args.seed, "seed", sim.seed)?;
    let (data, truth) = sample_dataset(&sim)?;
    write_dataset(&out_dir, &data)?;
    write_truth(&out_dir.join("truth.csv"), &truth)?;
    println!(
        "wrote {} individuals to {}",
        data.len(),
        out_dir.display()
    );
    println!("  {}", out_dir.join("observations.csv").display());
    println!("  {}", out_dir.join("features.csv").display());
    println!("  {}", out_dir.join("truth.csv").display());
    Ok(())
}

fn cmd_fit(args: FitArgs, cfg: &FileConfig) -> Result<()> {
    let data = read_dataset(&args.data.observations, &args.data.features)?;
    let g = cfg.resolve(args.model.num_subtypes, "num-subtypes", 3)?;
    let base_cov = covariance_from(&args.model, cfg)?;
    let bases = bases_from(&args.model, cfg)?;
    let em = em_from(&args.em, cfg)?;

    let candidates: Vec<CovarianceParams> = match cfg.resolve_opt(args.grid.clone(), "grid") {
        Some(raw) => raw
            .split(';')
            .map(|c| grid_candidate(c, &base_cov))
            .collect::<Result<_>>()?,
        None => vec![base_cov.clone()],
    };

    match args.kind {
        FitKind::Full | FitKind::NoPersonalization => {
            let mut best: Option<(CovarianceParams, trajpred::model::ModelParams, trajpred::learning::EmTrace)> =
                None;
            for cov in &candidates {
                let (params, trace) = fit_em(&data, g, cov, &bases, &em)?;
                let ll = *trace.logliks.last().unwrap();
                println!("candidate {}: loglik {ll:.6}", describe_covariance(cov));
                let better = best
                    .as_ref()
                    .map(|(_, _, t)| ll > *t.logliks.last().unwrap())
                    .unwrap_or(true);
                if better {
                    best = Some((cov.clone(), params, trace));
                }
            }
            let (cov, params, trace) = best.expect("at least one candidate");
            let final_loglik = *trace.logliks.last().unwrap();
            let q_p = data.individuals[0].population_features.len();
            let q_z = data.individuals[0].subtype_features.len();
            let k = free_param_count(g, bases.population.dim(), q_p, bases.subtype.dim(), q_z);
            let bic = -2.0 * final_loglik + k as f64 * (data.len() as f64).ln();
            if candidates.len() > 1 {
                println!("selected {}", describe_covariance(&cov));
            }
            println!("final loglik {final_loglik:.6}");
            println!("BIC {bic:.6} (k = {k}, M = {})", data.len());

            let training = TrainingMeta {
                num_subtypes: g,
                seed: em.seed,
                em: em.clone(),
                final_loglik,
                bic: Some(bic),
                rng_algorithm: "chacha8".into(),
            };
            let body = match args.kind {
                FitKind::Full => ModelFileBody::Full {
                    params,
                    training: training.clone(),
                },
                FitKind::NoPersonalization => {
                    let reduced =
                        fit_no_personalization(&data, &params, ReducedCovariance::IidOnly, &em)?;
                    ModelFileBody::NoPersonalization {
                        model: reduced,
                        training: Some(training.clone()),
                    }
                }
                _ => unreachable!(),
            };
            save_model(
                &args.out,
                &ModelFile {
                    format_version: MODEL_FORMAT_VERSION,
                    body,
                },
            )?;
            if let Some(trace_path) = &args.trace_out {
                write_trace(trace_path, &trace)?;
            }
        }
        FitKind::BsplineFeatures => {
            let model = fit_bspline_features(&data, &bases.subtype, 1e-6)?;
            save_model(
                &args.out,
                &ModelFile {
                    format_version: MODEL_FORMAT_VERSION,
                    body: ModelFileBody::BsplineFeatures { model },
                },
            )?;
        }
        FitKind::BsplineGp => {
            let model = fit_bspline_gp(&data, &bases.subtype, 1e-6, &base_cov, &bases.individual)?;
            save_model(
                &args.out,
                &ModelFile {
                    format_version: MODEL_FORMAT_VERSION,
                    body: ModelFileBody::BsplineGp { model },
                },
            )?;
        }
    }
    println!("model written to {}", args.out.display());
    Ok(())
}

fn query_times(args: &PredictArgs, cfg: &FileConfig) -> Result<Vec<f64>> {
    if let Some(raw) = cfg.resolve_opt(args.query_times.clone(), "query-times") {
        return parse_f64_list(&raw, "--query-times");
    }
    let start = cfg.resolve(args.grid_start, "grid-start", 0.0)?;
    let end = cfg.resolve(args.grid_end, "grid-end", 25.0)?;
    let step = cfg.resolve(args.grid_step, "grid-step", 0.1)?;
    if step <= 0.0 || end < start {
        return Err(Error::Data("invalid query grid".into()));
    }
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let t = start + step * k as f64;
        if t > end + 1e-9 {
            break;
        }
        out.push(t.min(end));
        k += 1;
    }
    Ok(out)
}

fn zero_vec(n: usize) -> Vec<f64> {
    vec![0.0; n]
}

fn predict_with_model(
    file: &ModelFile,
    ind: &IndividualRecord,
    times: &[f64],
    mode: PredictionMode,
) -> Result<TrajectoryPrediction> {
    match &file.body {
        ModelFileBody::Full { params, .. } => predict_trajectory(params, ind, times, mode),
        ModelFileBody::BsplineFeatures { model } => {
            let mean = model.mean_at(&ind.subtype_features, times);
            let sub: Vec<f64> = mean.iter().cloned().collect();
            Ok(TrajectoryPrediction {
                times: times.to_vec(),
                population: zero_vec(times.len()),
                predicted: sub.clone(),
                subpopulation: sub,
                individual: zero_vec(times.len()),
                noise: zero_vec(times.len()),
                mode,
                ranked_subtypes: Vec::new(),
            })
        }
        ModelFileBody::BsplineGp { model } => {
            let parts = model.predict_components(ind, times)?;
            let predicted: Vec<f64> = (0..times.len())
                .map(|j| parts.mean[j] + parts.individual[j] + parts.noise[j])
                .collect();
            Ok(TrajectoryPrediction {
                times: times.to_vec(),
                population: zero_vec(times.len()),
                subpopulation: parts.mean.iter().cloned().collect(),
                individual: parts.individual.iter().cloned().collect(),
                noise: parts.noise.iter().cloned().collect(),
                predicted,
                mode,
                ranked_subtypes: Vec::new(),
            })
        }
        ModelFileBody::NoPersonalization { model, .. } => {
            let post = model.posterior(ind)?;
            let mut ranked: Vec<(usize, f64)> = post.iter().cloned().enumerate().collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let params = &model.params;
            let (phi_p, _) = design_matrix_clamped(&params.basis_population, times);
            let (phi_z, _) = design_matrix_clamped(&params.basis_subtype, times);
            let rho = params.population_coeffs(&ind.population_features)?;
            let population = phi_p * rho;
            let curve = match mode {
                PredictionMode::MapSubtype => params.subtype_coeffs[ranked[0].0].clone(),
                PredictionMode::PosteriorMean => {
                    let mut c = DVector::zeros(params.basis_subtype.dim());
                    for (g, beta) in params.subtype_coeffs.iter().enumerate() {
                        c += beta * post[g];
                    }
                    c
                }
            };
            let sub = phi_z * curve;
            let predicted: Vec<f64> = (0..times.len())
                .map(|j| population[j] + sub[j])
                .collect();
            Ok(TrajectoryPrediction {
                times: times.to_vec(),
                population: population.iter().cloned().collect(),
                subpopulation: sub.iter().cloned().collect(),
                individual: zero_vec(times.len()),
                noise: zero_vec(times.len()),
                predicted,
                mode,
                ranked_subtypes: ranked,
            })
        }
    }
}

fn cmd_predict(args: PredictArgs, cfg: &FileConfig) -> Result<()> {
    let file = load_model(&args.model)?;
    let data = read_dataset(&args.data.observations, &args.data.features)?;
    let ind = data.find(&args.id)?;
    let cutoff = cfg.resolve(args.cutoff, "cutoff", f64::INFINITY)?;
    let history = ind.history_up_to(cutoff);
    let times = query_times(&args, cfg)?;
    let mode = match args.mode {
        ModeArg::Map => PredictionMode::MapSubtype,
        ModeArg::Mean => PredictionMode::PosteriorMean,
    };
    let pred = predict_with_model(&file, &history, &times, mode)?;

    if !pred.ranked_subtypes.is_empty() {
        let ranked: Vec<String> = pred
            .ranked_subtypes
            .iter()
            .map(|&(s, p)| format!("{}:{:.4}", s + 1, p))
            .collect();
        println!("ranked subtypes: {}", ranked.join(" "));
    }
    match (&args.out, &args.json_out) {
        (None, None) => {
            println!("time,population,subpopulation,individual,noise,yhat");
            for j in 0..pred.times.len() {
                println!(
                    "{},{},{},{},{},{}",
                    pred.times[j],
                    pred.population[j],
                    pred.subpopulation[j],
                    pred.individual[j],
                    pred.noise[j],
                    pred.predicted[j]
                );
            }
        }
        (out, json_out) => {
            if let Some(path) = out {
                write_prediction_csv(path, &pred)?;
                println!("prediction written to {}", path.display());
            }
            if let Some(path) = json_out {
                write_prediction_json(path, &args.id, &pred)?;
                println!("prediction written to {}", path.display());
            }
        }
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs, cfg: &FileConfig) -> Result<()> {
    let data = read_dataset(&args.data.observations, &args.data.features)?;
    let g = cfg.resolve(args.model.num_subtypes, "num-subtypes", 3)?;
    let cov = covariance_from(&args.model, cfg)?;
    let bases = bases_from(&args.model, cfg)?;
    let em = em_from(&args.em, cfg)?;

    let mut protocol = EvalProtocol {
        smoother_basis: bases.subtype.clone(),
        ..Default::default()
    };
    if let Some(raw) = cfg.resolve_opt(args.cutoffs.clone(), "cutoffs") {
        protocol.cutoffs = parse_f64_list(&raw, "--cutoffs")?;
    }
    if let Some(raw) = cfg.resolve_opt(args.bins.clone(), "bins") {
        protocol.bins = parse_bins(&raw)?;
    }
    protocol.folds = cfg.resolve(args.folds, "folds", protocol.folds)?;
    protocol.decline_threshold = cfg.resolve(
        args.decline_threshold,
        "decline-threshold",
        protocol.decline_threshold,
    )?;
    protocol.decline_cutoff =
        cfg.resolve(args.decline_cutoff, "decline-cutoff", protocol.decline_cutoff)?;
    protocol.grid_step = cfg.resolve(args.grid_step, "grid-step", protocol.grid_step)?;
    protocol.error_at_observations_only = args.observations_only;
    protocol.seed = cfg.resolve(args.eval_seed, "eval-seed", protocol.seed)?;

    let full = FullModelSpec {
        num_subtypes: g,
        cov: cov.clone(),
        bases: bases.clone(),
        em: em.clone(),
        mode: PredictionMode::MapSubtype,
    };
    let feats = BsplineFeaturesSpec {
        basis: bases.subtype.clone(),
        ridge: 1e-6,
    };
    let gp = BsplineGpSpec {
        basis: bases.subtype.clone(),
        ridge: 1e-6,
        cov: cov.clone(),
        basis_individual: bases.individual.clone(),
    };
    let np = NoPersonalizationSpec {
        full: full.clone(),
        covariance: if args.reduced_with_ou {
            ReducedCovariance::WithOu
        } else {
            ReducedCovariance::IidOnly
        },
    };

    let names = cfg
        .resolve_opt(args.models.clone(), "models")
        .unwrap_or_else(|| "full,bspline-features,bspline-gp,no-personalization".to_string());
    let mut models: Vec<&dyn TrajectoryModel> = Vec::new();
    for name in names.split(',') {
        match name.trim() {
            "full" => models.push(&full),
            "bspline-features" => models.push(&feats),
            "bspline-gp" => models.push(&gp),
            "no-personalization" => models.push(&np),
            other => return Err(Error::NotFound(format!("model '{other}'"))),
        }
    }
    let first_name = models
        .first()
        .ok_or_else(|| Error::Data("no models requested".into()))?
        .name();

    let report = evaluate(&models, &data, &protocol)?;
    print!("{}", format_report_table(&report));
    for d in &report.detection {
        println!(
            "decline detection {:<22} TPR {:.3} FPR {:.3} (positives {}, negatives {})",
            d.model, d.tpr, d.fpr, d.n_positive, d.n_negative
        );
    }
    if !report.fold_failures.is_empty() {
        for (fold, model, err) in &report.fold_failures {
            log::warn!("fold {fold}: {model} failed: {err}");
        }
    }
    write_report(&args.out_dir, &report, &first_name)?;
    println!("report written to {}", args.out_dir.display());
    println!("  {}", args.out_dir.join("mae.csv").display());
    println!("  {}", args.out_dir.join("comparisons.csv").display());
    println!("  {}", args.out_dir.join("detection.csv").display());
    Ok(())
}

fn cmd_select(args: SelectArgs, cfg: &FileConfig) -> Result<()> {
    let data = read_dataset(&args.data.observations, &args.data.features)?;
    let cov = covariance_from(&args.model, cfg)?;
    let bases = bases_from(&args.model, cfg)?;
    let em = em_from(&args.em, cfg)?;

    let candidates: Vec<usize> = match cfg.resolve_opt(args.g_values.clone(), "g-values") {
        Some(raw) => raw
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Data(format!("--g-values entry '{s}'")))
            })
            .collect::<Result<_>>()?,
        None => {
            let lo = cfg.resolve(args.g_min, "g-min", 1)?;
            let hi = cfg.resolve(args.g_max, "g-max", 6)?;
            if lo == 0 || hi < lo {
                return Err(Error::Data("need 1 <= g-min <= g-max".into()));
            }
            (lo..=hi).collect()
        }
    };
    let selection = select_num_subtypes(&data, &candidates, &cov, &bases, &em)?;
    println!("{:>4} {:>16} {:>16} {:>6}", "G", "loglik", "BIC", "free");
    for row in &selection.rows {
        let marker = if row.num_subtypes == selection.selected {
            " *"
        } else {
            ""
        };
        println!(
            "{:>4} {:>16.4} {:>16.4} {:>6}{marker}",
            row.num_subtypes, row.loglik, row.bic, row.free_params
        );
    }
    println!("selected G = {}", selection.selected);
    write_selection(&args.out, &selection)?;
    println!("table written to {}", args.out.display());
    Ok(())
}

//! File formats: the JSON model envelope, dataset CSVs, and the CSV
//! exports of traces, predictions, and evaluation reports.
//!
//! Numbers serialize as decimals with full round-trip precision, so a
//! saved model reloads bit-exactly. Subtype indices are 1-based in every
//! file; in-memory indices are 0-based. All writes go through a
//! write-temp-then-rename step.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::baselines::{BsplineGpModel, FeatureSplineModel, NoPersonalizationModel};
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::learning::{EmConfig, EmTrace, SubtypeSelection};
use crate::model::{Dataset, DatasetMeta, IndividualRecord, ModelParams};
use crate::prediction::{PredictionMode, TrajectoryPrediction};
use crate::simulate::TruthTable;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Metadata recorded alongside a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub num_subtypes: usize,
    pub seed: u64,
    pub em: EmConfig,
    pub final_loglik: f64,
    pub bic: Option<f64>,
    /// Name of the RNG algorithm data/fits were produced with.
    pub rng_algorithm: String,
}

/// On-disk model envelope with a kind tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub body: ModelFileBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFileBody {
    Full {
        params: ModelParams,
        training: TrainingMeta,
    },
    BsplineFeatures {
        model: FeatureSplineModel,
    },
    BsplineGp {
        model: BsplineGpModel,
    },
    NoPersonalization {
        model: NoPersonalizationModel,
        training: Option<TrainingMeta>,
    },
}

impl ModelFile {
    pub fn full(params: ModelParams, training: TrainingMeta) -> Self {
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            body: ModelFileBody::Full { params, training },
        }
    }
}

/// Write bytes to `path` via a sibling temp file and rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<()> {
    let json = serde_json::to_string_pretty(model)
        .map_err(|e| Error::Data(format!("model serialization failed: {e}")))?;
    atomic_write(path, json.as_bytes())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let text = fs::read_to_string(path)?;
    let model: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if model.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported format version {}",
            path.display(),
            model.format_version
        )));
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Dataset CSVs
// ---------------------------------------------------------------------------

fn parse_f64(field: &str, file: &str, line: u64) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("{file}:{line}: cannot parse number '{field}'")))
}

/// Read the observation and feature CSVs into a dataset. Individuals keep
/// the feature-file row order; observations are sorted by time within each
/// individual. Every observation id must appear in the feature file.
pub fn read_dataset(observations: &Path, features: &Path) -> Result<Dataset> {
    let feat_name = features.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(features)
        .map_err(|e| Error::Data(format!("{feat_name}: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{feat_name}: {e}")))?
        .clone();
    if headers.is_empty() || headers.get(0) != Some("id") {
        return Err(Error::Data(format!(
            "{feat_name}:1: first column must be 'id'"
        )));
    }
    let feature_names: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();

    let mut order: Vec<String> = Vec::new();
    let mut features_by_id = std::collections::HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{feat_name}: {e}")))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = record
            .get(0)
            .ok_or_else(|| Error::Data(format!("{feat_name}:{line}: missing id")))?
            .to_string();
        if record.len() != feature_names.len() + 1 {
            return Err(Error::Data(format!(
                "{feat_name}:{line}: expected {} fields, got {}",
                feature_names.len() + 1,
                record.len()
            )));
        }
        let mut bits = Vec::with_capacity(feature_names.len());
        for k in 0..feature_names.len() {
            let v = parse_f64(record.get(k + 1).unwrap(), &feat_name, line)?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::Data(format!(
                    "{feat_name}:{line}: feature entries must be 0 or 1, got {v}"
                )));
            }
            bits.push(v);
        }
        if features_by_id.insert(id.clone(), bits).is_some() {
            return Err(Error::Data(format!(
                "{feat_name}:{line}: duplicate id {id}"
            )));
        }
        order.push(id);
    }

    let obs_name = observations.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(observations)
        .map_err(|e| Error::Data(format!("{obs_name}: {e}")))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::Data(format!("{obs_name}: {e}")))?;
        let expect = ["id", "time", "value"];
        if headers.len() != 3 || headers.iter().zip(expect).any(|(a, b)| a != b) {
            return Err(Error::Data(format!(
                "{obs_name}:1: header must be id,time,value"
            )));
        }
    }
    let mut series: std::collections::HashMap<String, Vec<(f64, f64)>> =
        std::collections::HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{obs_name}: {e}")))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(Error::Data(format!(
                "{obs_name}:{line}: expected 3 fields, got {}",
                record.len()
            )));
        }
        let id = record.get(0).unwrap().to_string();
        if !features_by_id.contains_key(&id) {
            return Err(Error::Data(format!(
                "{obs_name}:{line}: id {id} not present in the feature file"
            )));
        }
        let t = parse_f64(record.get(1).unwrap(), &obs_name, line)?;
        if t < 0.0 {
            return Err(Error::Data(format!(
                "{obs_name}:{line}: time must be non-negative, got {t}"
            )));
        }
        let v = parse_f64(record.get(2).unwrap(), &obs_name, line)?;
        series.entry(id).or_default().push((t, v));
    }

    let individuals: Vec<IndividualRecord> = order
        .iter()
        .map(|id| {
            let mut obs = series.remove(id).unwrap_or_default();
            obs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let bits = &features_by_id[id];
            let mut x = Vec::with_capacity(bits.len() + 1);
            x.push(1.0);
            x.extend_from_slice(bits);
            let x = DVector::from_vec(x);
            IndividualRecord::new(
                id.clone(),
                obs.iter().map(|o| o.0).collect(),
                obs.iter().map(|o| o.1).collect(),
                x.clone(),
                x,
            )
        })
        .collect::<Result<_>>()?;

    Dataset::new(
        individuals,
        DatasetMeta {
            feature_names,
            marker_name: "marker".to_string(),
        },
    )
}

fn csv_into_bytes(writer: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    writer
        .into_inner()
        .map_err(|e| Error::Data(format!("csv flush failed: {e}")))
}

/// Write `observations.csv` and `features.csv` under `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut obs = csv::Writer::from_writer(Vec::new());
    obs.write_record(["id", "time", "value"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for ind in &data.individuals {
        for j in 0..ind.n_obs() {
            obs.write_record(&[
                ind.id.clone(),
                format!("{}", ind.times[j]),
                format!("{}", ind.values[j]),
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    atomic_write(&dir.join("observations.csv"), &csv_into_bytes(obs)?)?;

    let mut feats = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend(data.meta.feature_names.iter().cloned());
    feats
        .write_record(&header)
        .map_err(|e| Error::Data(e.to_string()))?;
    for ind in &data.individuals {
        let mut row = vec![ind.id.clone()];
        // drop the leading intercept entry
        for k in 1..ind.subtype_features.len() {
            row.push(format!("{}", ind.subtype_features[k]));
        }
        feats
            .write_record(&row)
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    atomic_write(&dir.join("features.csv"), &csv_into_bytes(feats)?)
}

/// Write the latent truth table (`truth.csv`): id, 1-based subtype, and
/// the random-effect components.
pub fn write_truth(path: &Path, truth: &TruthTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let d = truth.first().map(|t| t.random_effects.len()).unwrap_or(0);
    let mut header = vec!["id".to_string(), "subtype".to_string()];
    header.extend((0..d).map(|k| format!("b{k}")));
    w.write_record(&header)
        .map_err(|e| Error::Data(e.to_string()))?;
    for t in truth {
        let mut row = vec![t.id.clone(), format!("{}", t.subtype + 1)];
        for k in 0..d {
            row.push(format!("{}", t.random_effects[k]));
        }
        w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
    }
    atomic_write(path, &csv_into_bytes(w)?)
}

pub fn read_truth(path: &Path) -> Result<Vec<(String, usize)>> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{name}: {e}")))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{name}: {e}")))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = record.get(0).unwrap_or_default().to_string();
        let z: usize = record
            .get(1)
            .unwrap_or_default()
            .parse()
            .map_err(|_| Error::Data(format!("{name}:{line}: bad subtype")))?;
        if z == 0 {
            return Err(Error::Data(format!(
                "{name}:{line}: subtype indices are 1-based"
            )));
        }
        out.push((id, z - 1));
    }
    Ok(out)
}

/// EM trace as CSV (iteration, loglik) for plotting.
pub fn write_trace(path: &Path, trace: &EmTrace) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "loglik"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for (i, ll) in trace.logliks.iter().enumerate() {
        w.write_record(&[format!("{i}"), format!("{ll}")])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    atomic_write(path, &csv_into_bytes(w)?)
}

// ---------------------------------------------------------------------------
// Prediction output
// ---------------------------------------------------------------------------

pub fn write_prediction_csv(path: &Path, pred: &TrajectoryPrediction) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["time", "population", "subpopulation", "individual", "noise", "yhat"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for j in 0..pred.times.len() {
        w.write_record(&[
            format!("{}", pred.times[j]),
            format!("{}", pred.population[j]),
            format!("{}", pred.subpopulation[j]),
            format!("{}", pred.individual[j]),
            format!("{}", pred.noise[j]),
            format!("{}", pred.predicted[j]),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    atomic_write(path, &csv_into_bytes(w)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct RankedSubtype {
    subtype: usize,
    probability: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionDocument {
    id: String,
    mode: PredictionMode,
    times: Vec<f64>,
    population: Vec<f64>,
    subpopulation: Vec<f64>,
    individual: Vec<f64>,
    noise: Vec<f64>,
    yhat: Vec<f64>,
    ranked_subtypes: Vec<RankedSubtype>,
}

/// JSON variant of the prediction output; adds the ranked subtype list
/// (1-based indices).
pub fn write_prediction_json(path: &Path, id: &str, pred: &TrajectoryPrediction) -> Result<()> {
    let doc = PredictionDocument {
        id: id.to_string(),
        mode: pred.mode,
        times: pred.times.clone(),
        population: pred.population.clone(),
        subpopulation: pred.subpopulation.clone(),
        individual: pred.individual.clone(),
        noise: pred.noise.clone(),
        yhat: pred.predicted.clone(),
        ranked_subtypes: pred
            .ranked_subtypes
            .iter()
            .map(|&(g, p)| RankedSubtype {
                subtype: g + 1,
                probability: p,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Data(format!("prediction serialization failed: {e}")))?;
    atomic_write(path, json.as_bytes())
}

// ---------------------------------------------------------------------------
// Evaluation report output
// ---------------------------------------------------------------------------

/// Write `mae.csv`, `comparisons.csv`, and `detection.csv` under `dir`.
/// The `p_value_vs_first` column tests "first-listed model < this model".
pub fn write_report(dir: &Path, report: &EvalReport, first_model: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "n/a".into());

    let mut mae = csv::Writer::from_writer(Vec::new());
    mae.write_record([
        "model",
        "cutoff",
        "bin_start",
        "bin_end",
        "mae",
        "n",
        "p_value_vs_first",
    ])
    .map_err(|e| Error::Data(e.to_string()))?;
    for cell in &report.cells {
        let p = if cell.model == first_model {
            None
        } else {
            report
                .comparison(first_model, &cell.model, cell.cutoff, cell.bin)
                .and_then(|c| c.p_value)
        };
        mae.write_record(&[
            cell.model.clone(),
            format!("{}", cell.cutoff),
            format!("{}", cell.bin.0),
            format!("{}", cell.bin.1),
            format!("{}", cell.mae),
            format!("{}", cell.n),
            fmt_opt(p),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    atomic_write(&dir.join("mae.csv"), &csv_into_bytes(mae)?)?;

    let mut cmp = csv::Writer::from_writer(Vec::new());
    cmp.write_record([
        "model_a", "model_b", "cutoff", "bin_start", "bin_end", "mean_diff", "t_stat",
        "p_value", "n",
    ])
    .map_err(|e| Error::Data(e.to_string()))?;
    for c in &report.comparisons {
        cmp.write_record(&[
            c.model_a.clone(),
            c.model_b.clone(),
            format!("{}", c.cutoff),
            format!("{}", c.bin.0),
            format!("{}", c.bin.1),
            format!("{}", c.mean_diff),
            fmt_opt(c.t_stat),
            fmt_opt(c.p_value),
            format!("{}", c.n),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    atomic_write(&dir.join("comparisons.csv"), &csv_into_bytes(cmp)?)?;

    let mut det = csv::Writer::from_writer(Vec::new());
    det.write_record(["model", "tpr", "fpr", "n_positive", "n_negative"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for d in &report.detection {
        det.write_record(&[
            d.model.clone(),
            format!("{}", d.tpr),
            format!("{}", d.fpr),
            format!("{}", d.n_positive),
            format!("{}", d.n_negative),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    atomic_write(&dir.join("detection.csv"), &csv_into_bytes(det)?)
}

/// Human-readable MAE table, one panel per cutoff.
pub fn format_report_table(report: &EvalReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let mut cutoffs: Vec<f64> = report.cells.iter().map(|c| c.cutoff).collect();
    cutoffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cutoffs.dedup();
    let mut models: Vec<String> = report.cells.iter().map(|c| c.model.clone()).collect();
    models.dedup();
    for cutoff in cutoffs {
        writeln!(out, "Predictions using {cutoff} years of data").unwrap();
        let mut bins: Vec<(f64, f64)> = report
            .cells
            .iter()
            .filter(|c| c.cutoff == cutoff)
            .map(|c| c.bin)
            .collect();
        bins.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        bins.dedup();
        write!(out, "{:<24}", "model").unwrap();
        for bin in &bins {
            write!(out, "  ({},{}]", bin.0, bin.1).unwrap();
        }
        writeln!(out).unwrap();
        for model in &models {
            write!(out, "{model:<24}").unwrap();
            for bin in &bins {
                match report.cell(model, cutoff, *bin) {
                    Some(c) => write!(out, "  {:>8.2}", c.mae).unwrap(),
                    None => write!(out, "  {:>8}", "-").unwrap(),
                }
            }
            writeln!(out).unwrap();
        }
        writeln!(out).unwrap();
    }
    out
}

/// BIC selection table CSV.
pub fn write_selection(path: &Path, selection: &SubtypeSelection) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["num_subtypes", "loglik", "bic", "free_params", "selected"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for row in &selection.rows {
        w.write_record(&[
            format!("{}", row.num_subtypes),
            format!("{}", row.loglik),
            format!("{}", row.bic),
            format!("{}", row.free_params),
            format!("{}", row.num_subtypes == selection.selected),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    atomic_write(path, &csv_into_bytes(w)?)
}

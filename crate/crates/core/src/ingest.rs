//! Dataset manifests, CSV matrices, the calibration/evaluation split and
//! the JSON report and weights files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datamodel::{softmax, EnsembleTensor, ProbVector, Validation};
use crate::error::{CalError, Result};
use crate::metrics::{BinPolicy, BinningScheme};
use crate::pipeline::Aggregation;
use crate::posthoc::{Alpha2Mode, AttenuationWeights, MappingConfig, MetricReport, MetricSet};
use crate::truth::TruthResult;

pub const MANIFEST_VERSION: u64 = 1;
pub const REPORT_VERSION: u64 = 1;
pub const WEIGHTS_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Probabilities,
    Logits,
}

/// Describes an ensemble on disk. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u64,
    pub num_classes: usize,
    pub values: ValueKind,
    pub labels: String,
    pub sources: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hv: Option<String>,
}

/// An ensemble loaded from a manifest.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub ensemble: EnsembleTensor,
    /// Prediction rows that needed renormalizing.
    pub renormalized: usize,
    pub hv: Option<Vec<f64>>,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| CalError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CalError::io(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(open(path)?))
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> CalError {
    CalError::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn record_line(rec: &csv::StringRecord, fallback: u64) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(fallback)
}

fn csv_error(path: &Path, e: csv::Error) -> CalError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CalError::io(path, io),
        other => parse_error(path, line, format!("{other:?}")),
    }
}

/// Reads a header-less numeric CSV with exactly `cols` columns per row.
pub fn read_matrix(path: &Path, cols: usize) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut rows = Vec::new();
    for (k, rec) in csv_reader(path)?.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = record_line(&rec, k as u64 + 1);
        if rec.len() != cols {
            return Err(parse_error(path, line, format!("expected {cols} columns, found {}", rec.len())));
        }
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| parse_error(path, line, format!("malformed number {f:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(x) = row.iter().find(|x| !x.is_finite()) {
            return Err(parse_error(path, line, format!("non-finite value {x}")));
        }
        rows.push((line, row));
    }
    Ok(rows)
}

/// Reads one non-negative integer label per line.
pub fn read_labels(path: &Path) -> Result<Vec<(u64, usize)>> {
    let mut out = Vec::new();
    for (k, rec) in csv_reader(path)?.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = record_line(&rec, k as u64 + 1);
        if rec.len() != 1 {
            return Err(parse_error(path, line, format!("expected one label, found {} fields", rec.len())));
        }
        let y = rec[0].parse::<usize>().map_err(|_| parse_error(path, line, format!("malformed label {:?}", &rec[0])))?;
        out.push((line, y));
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| CalError::io(path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| parse_error(path, e.line() as u64, e.to_string()))?;
    check_version(path, &raw, MANIFEST_VERSION)?;
    let m: Manifest = serde_json::from_value(raw)
        .map_err(|e| CalError::Format { path: path.to_path_buf(), message: e.to_string() })?;
    if m.sources.is_empty() {
        return Err(CalError::Format { path: path.to_path_buf(), message: "manifest lists no sources".into() });
    }
    if m.num_classes < 2 {
        return Err(CalError::Format {
            path: path.to_path_buf(),
            message: format!("num_classes must be at least 2, got {}", m.num_classes),
        });
    }
    Ok(m)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_json(path, manifest)
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

fn load_source(path: &Path, cfg: &Manifest) -> Result<(Vec<ProbVector>, usize)> {
    let rows = read_matrix(path, cfg.num_classes)?;
    let mut preds = Vec::with_capacity(rows.len());
    let mut renormalized = 0;
    for (line, row) in rows {
        let p = match cfg.values {
            ValueKind::Logits => softmax(&row).map_err(|e| parse_error(path, line, e.to_string()))?,
            ValueKind::Probabilities => {
                let (p, v) = ProbVector::from_raw(row).map_err(|e| parse_error(path, line, e.to_string()))?;
                if v == Validation::Renormalized {
                    renormalized += 1;
                }
                p
            }
        };
        preds.push(p);
    }
    Ok((preds, renormalized))
}

/// Loads and validates the ensemble a manifest describes.
pub fn load(manifest_path: &Path) -> Result<LoadedData> {
    let m = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let label_path = resolve(base, &m.labels);
    let labels = read_labels(&label_path)?;
    for &(line, y) in &labels {
        if y >= m.num_classes {
            return Err(parse_error(&label_path, line, format!("label {y} out of range for {} classes", m.num_classes)));
        }
    }
    let source_paths: Vec<PathBuf> = m.sources.iter().map(|s| resolve(base, s)).collect();
    let loaded: Vec<(Vec<ProbVector>, usize)> =
        source_paths.par_iter().map(|p| load_source(p, &m)).collect::<Result<_>>()?;

    let n0 = loaded[0].0.len();
    for (k, (preds, _)) in loaded.iter().enumerate().skip(1) {
        if preds.len() != n0 {
            return Err(CalError::RowMismatch {
                first: source_paths[0].clone(),
                first_rows: n0,
                other: source_paths[k].clone(),
                other_rows: preds.len(),
            });
        }
    }
    if labels.len() != n0 {
        return Err(CalError::RowMismatch {
            first: source_paths[0].clone(),
            first_rows: n0,
            other: label_path,
            other_rows: labels.len(),
        });
    }
    let hv = match &m.hv {
        None => None,
        Some(rel) => {
            let path = resolve(base, rel);
            let rows = read_matrix(&path, 1)?;
            if rows.len() != n0 {
                return Err(CalError::RowMismatch {
                    first: source_paths[0].clone(),
                    first_rows: n0,
                    other: path,
                    other_rows: rows.len(),
                });
            }
            Some(rows.into_iter().map(|(_, r)| r[0]).collect())
        }
    };
    let renormalized = loaded.iter().map(|(_, r)| r).sum();
    let ensemble = EnsembleTensor::from_sources(
        m.sources.clone(),
        loaded.into_iter().map(|(p, _)| p).collect(),
        labels.into_iter().map(|(_, y)| y).collect(),
    )?;
    Ok(LoadedData { ensemble, renormalized, hv })
}

/// Writes rows as header-less CSV using the shortest exact decimal form.
pub fn write_matrix<R: AsRef<[f64]>>(path: &Path, rows: &[R]) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| CalError::io(path, e);
    for row in rows {
        let mut first = true;
        for x in row.as_ref() {
            if !first {
                out.write_all(b",").map_err(io)?;
            }
            first = false;
            write!(out, "{x}").map_err(io)?;
        }
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn write_column(path: &Path, values: &[f64]) -> Result<()> {
    let rows: Vec<[f64; 1]> = values.iter().map(|&x| [x]).collect();
    write_matrix(path, &rows)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| CalError::io(path, e);
    for y in labels {
        writeln!(out, "{y}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Writes a truth vector per sample (`N × L`).
pub fn save_truth_vectors(path: &Path, results: &[TruthResult]) -> Result<()> {
    let rows: Vec<&ProbVector> = results.iter().map(|r| &r.truth_vector).collect();
    write_matrix(path, &rows)
}

/// Writes the geometric variance per sample (`N × 1`).
pub fn save_hv(path: &Path, results: &[TruthResult]) -> Result<()> {
    let hv: Vec<f64> = results.iter().map(|r| r.hv).collect();
    write_column(path, &hv)
}

/// Per-source mean and standard deviation of the reliabilities and
/// uncertainties, with a header row.
pub fn save_reliability_summary(path: &Path, source_ids: &[String], results: &[TruthResult]) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| CalError::io(path, e);
    writeln!(out, "source,mean_reliability,std_reliability,mean_uncertainty,std_uncertainty").map_err(io)?;
    for (s, id) in source_ids.iter().enumerate() {
        let omega: Vec<f64> = results.iter().map(|r| r.reliabilities[s]).collect();
        let upsilon: Vec<f64> = results.iter().map(|r| r.uncertainties[s]).collect();
        let (mo, so) = mean_std(&omega);
        let (mu, su) = mean_std(&upsilon);
        writeln!(out, "{id},{mo},{so},{mu},{su}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { seed: 0, fraction: 0.5 }
    }
}

/// Seeded shuffle of `0..n`; the first `⌊fraction·n⌋` indices form the
/// calibration set and the rest the evaluation set. Both are returned sorted.
pub fn split(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.fraction > 0.0 && spec.fraction < 1.0) {
        return Err(CalError::InvalidConfig(format!("split fraction must lie in (0, 1), got {}", spec.fraction)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    idx.shuffle(&mut rng);
    let cut = (spec.fraction * n as f64).floor() as usize;
    let mut eval = idx.split_off(cut);
    idx.sort_unstable();
    eval.sort_unstable();
    Ok((idx, eval))
}

fn check_version(path: &Path, raw: &serde_json::Value, expected: u64) -> Result<()> {
    match raw.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == expected => Ok(()),
        Some(found) => Err(CalError::SchemaVersion { path: path.to_path_buf(), found, expected }),
        None => Err(CalError::Format { path: path.to_path_buf(), message: "missing version field".into() }),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| CalError::io(path, e);
    serde_json::to_writer_pretty(&mut out, value)
        .map_err(|e| CalError::Format { path: path.to_path_buf(), message: e.to_string() })?;
    out.write_all(b"\n").map_err(io)?;
    out.flush().map_err(io)
}

fn read_versioned<T: DeserializeOwned>(path: &Path, expected: u64) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CalError::io(path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| parse_error(path, e.line() as u64, e.to_string()))?;
    check_version(path, &raw, expected)?;
    serde_json::from_value(raw).map_err(|e| CalError::Format { path: path.to_path_buf(), message: e.to_string() })
}

/// A metric before and after calibration, with spreads over replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub before: f64,
    pub after: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub before_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after_std: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub acc: MetricPair,
    pub ece: MetricPair,
    pub ece_kde: MetricPair,
    pub ks: MetricPair,
    pub nll: MetricPair,
    pub brier: MetricPair,
}

fn pick(m: &MetricSet, key: usize) -> f64 {
    [m.acc, m.ece, m.ece_kde, m.ks, m.nll, m.brier][key]
}

impl MetricTable {
    pub fn from_report(r: &MetricReport) -> Self {
        Self::summarize(std::slice::from_ref(r), false)
    }

    /// Means over replications, with standard deviations when `with_std`.
    pub fn summarize(reports: &[MetricReport], with_std: bool) -> Self {
        let pair = |k: usize| {
            let before: Vec<f64> = reports.iter().map(|r| pick(&r.before, k)).collect();
            let after: Vec<f64> = reports.iter().map(|r| pick(&r.after, k)).collect();
            let (bm, bs) = mean_std(&before);
            let (am, as_) = mean_std(&after);
            MetricPair {
                before: bm,
                after: am,
                before_std: with_std.then_some(bs),
                after_std: with_std.then_some(as_),
            }
        };
        MetricTable { acc: pair(0), ece: pair(1), ece_kde: pair(2), ks: pair(3), nll: pair(4), brier: pair(5) }
    }

    pub fn rows(&self) -> [(&'static str, MetricPair); 6] {
        [
            ("acc", self.acc),
            ("ece", self.ece),
            ("ece_kde", self.ece_kde),
            ("ks", self.ks),
            ("nll", self.nll),
            ("brier", self.brier),
        ]
    }
}

/// Metrics of one calibration/evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub seed: u64,
    pub calibration_samples: usize,
    pub evaluation_samples: usize,
    #[serde(flatten)]
    pub metrics: MetricTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u64,
    pub command: String,
    pub seed: u64,
    pub samples: usize,
    #[serde(flatten)]
    pub metrics: MetricTable,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replications: Vec<ReplicationReport>,
}

pub fn save_report(path: &Path, report: &Report) -> Result<()> {
    write_json(path, report)
}

pub fn load_report(path: &Path) -> Result<Report> {
    read_versioned(path, REPORT_VERSION)
}

/// How a set of weights was fitted, so evaluation can reuse the same split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub version: u64,
    pub bins: Vec<f64>,
    pub bin_policy: BinPolicy,
    pub psi: Vec<f64>,
    pub alpha1: f64,
    pub alpha2_mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha2: Option<f64>,
    /// Aggregation the weights were fitted on.
    pub aggregation: Aggregation,
    /// Whether the weights expect geometric variance from truth discovery.
    pub regularized: bool,
    pub loss_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitRecord>,
}

impl WeightsFile {
    pub fn new(w: &AttenuationWeights, aggregation: Aggregation, regularized: bool, split: Option<SplitRecord>) -> Self {
        let alpha2 = match w.mapping.alpha2_mode {
            Alpha2Mode::Constant(a) => Some(a),
            _ => None,
        };
        WeightsFile {
            version: WEIGHTS_VERSION,
            bins: w.bins.endpoints().to_vec(),
            bin_policy: w.bins.policy(),
            psi: w.psi.clone(),
            alpha1: w.mapping.alpha1,
            alpha2_mode: w.mapping.alpha2_mode.name().to_string(),
            alpha2,
            aggregation,
            regularized,
            loss_trace: w.loss_trace.clone(),
            split,
        }
    }

    pub fn to_weights(&self) -> Result<AttenuationWeights> {
        let mode = match (self.alpha2_mode.as_str(), self.alpha2) {
            ("zero", _) => Alpha2Mode::Zero,
            ("per_bin_psi", _) => Alpha2Mode::PerBinPsi,
            ("constant", Some(a)) => Alpha2Mode::Constant(a),
            (m, a) => {
                return Err(CalError::InvalidConfig(format!("unknown alpha2 mode {m:?} (alpha2 = {a:?})")));
            }
        };
        let bins = BinningScheme::from_endpoints(self.bins.clone(), self.bin_policy)?;
        let mut w = AttenuationWeights::new(self.psi.clone(), bins, MappingConfig { alpha1: self.alpha1, alpha2_mode: mode })?;
        w.loss_trace = self.loss_trace.clone();
        Ok(w)
    }
}

pub fn save_weights(path: &Path, weights: &WeightsFile) -> Result<()> {
    write_json(path, weights)
}

pub fn load_weights(path: &Path) -> Result<WeightsFile> {
    read_versioned(path, WEIGHTS_VERSION)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_halves_small_set() {
        let (c, e) = split(4, &SplitSpec::default()).unwrap();
        assert_eq!((c.len(), e.len()), (2, 2));
        let mut all: Vec<usize> = c.iter().chain(&e).copied().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(split(10, &SplitSpec { seed: 0, fraction: 1.0 }).is_err());
        assert!(split(10, &SplitSpec { seed: 0, fraction: 0.0 }).is_err());
    }

    #[test]
    fn mean_std_of_constant() {
        assert_eq!(mean_std(&[2.0, 2.0, 2.0]), (2.0, 0.0));
    }

    #[test]
    fn weights_mode_round_trip() {
        let bins = BinningScheme::from_endpoints(vec![0.0, 0.4, 1.0], BinPolicy::EqualMass).unwrap();
        for mode in [Alpha2Mode::Zero, Alpha2Mode::Constant(0.25), Alpha2Mode::PerBinPsi] {
            let w = AttenuationWeights::new(vec![0.1, -0.2], bins.clone(), MappingConfig { alpha1: 1.5, alpha2_mode: mode })
                .unwrap();
            assert_eq!(WeightsFile::new(&w, Aggregation::Atde, true, None).to_weights().unwrap(), w);
        }
    }
}

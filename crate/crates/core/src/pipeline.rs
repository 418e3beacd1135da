//! Aggregation, fitting and evaluation wired together on one split.

use serde::{Deserialize, Serialize};

use crate::datamodel::{argmax_tiebreak, ensemble_means, EnsembleTensor};
use crate::error::{CalError, Result};
use crate::ingest::{split, SplitSpec};
use crate::metrics::{build_bins, BinPolicy, KdeConfig};
use crate::posthoc::{
    evaluate_pipeline, fit, fit_compositional, AttenuationWeights, CalibrationSample, EvalConfig, EvalSample,
    MappingConfig, MetricReport, TrainConfig,
};
use crate::truth::{discover_all, TruthConfig, TruthResult, Variant};

/// How the sources of each sample are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Plain ensemble average.
    Mean,
    Tde,
    Atde,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "de",
            Aggregation::Tde => "tde",
            Aggregation::Atde => "atde",
        }
    }
}

/// Aggregated predictions, and the truth-discovery results when run.
#[derive(Debug, Clone)]
pub struct Aggregated {
    pub samples: Vec<EvalSample>,
    pub truth: Option<Vec<TruthResult>>,
}

/// Combines the ensemble. With `with_hv`, the geometric variance comes from
/// truth discovery (accuracy-preserving for the plain average); otherwise it
/// is zero.
pub fn aggregate(ens: &EnsembleTensor, how: Aggregation, truth: &TruthConfig, with_hv: bool) -> Result<Aggregated> {
    let labels = ens.labels();
    let run = |variant: Variant| discover_all(ens, &TruthConfig { variant, ..*truth });
    let (samples, truth) = match how {
        Aggregation::Mean => {
            let tr = if with_hv { Some(run(Variant::AccuracyPreserving)?) } else { None };
            let samples = ensemble_means(ens)
                .into_iter()
                .enumerate()
                .map(|(i, probs)| {
                    let predicted = argmax_tiebreak(probs.as_slice(), None);
                    let hv = tr.as_ref().map_or(0.0, |t| t[i].hv);
                    EvalSample { probs, predicted, label: labels[i], hv }
                })
                .collect();
            (samples, tr)
        }
        Aggregation::Tde | Aggregation::Atde => {
            let variant = if how == Aggregation::Tde { Variant::Vanilla } else { Variant::AccuracyPreserving };
            let tr = run(variant)?;
            let samples = tr
                .iter()
                .enumerate()
                .map(|(i, r)| EvalSample {
                    probs: r.truth_vector.clone(),
                    predicted: r.predicted_class,
                    label: labels[i],
                    hv: if with_hv { r.hv } else { 0.0 },
                })
                .collect();
            (samples, Some(tr))
        }
    };
    Ok(Aggregated { samples, truth })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationPlan {
    pub bins: usize,
    pub hist: TrainConfig,
    pub kde: TrainConfig,
    pub mapping: MappingConfig,
    pub split: SplitSpec,
}

impl CalibrationPlan {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        let kde = KdeConfig::for_classes(num_classes);
        CalibrationPlan {
            bins: 15,
            hist: TrainConfig { seed, ..TrainConfig::hist(70) },
            kde: TrainConfig { seed, ..TrainConfig::kde(5, kde) },
            mapping: MappingConfig::default(),
            split: SplitSpec { seed, fraction: 0.5 },
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { bins: self.bins, kde: self.kde.kde }
    }
}

#[derive(Debug, Clone)]
pub struct Replication {
    pub weights: AttenuationWeights,
    pub report: MetricReport,
    pub calibration: Vec<usize>,
    pub evaluation: Vec<usize>,
}

fn pick(samples: &[EvalSample], idx: &[usize]) -> Vec<EvalSample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

/// Fits the attenuation weights on the calibration part of the split: the
/// histogram stage always runs, the kernel stage when it has epochs.
pub fn fit_weights(calibration: &[EvalSample], plan: &CalibrationPlan) -> Result<AttenuationWeights> {
    let data: Vec<CalibrationSample> = calibration.iter().map(EvalSample::calibration_sample).collect();
    if data.len() < plan.bins {
        return Err(CalError::InsufficientData(format!(
            "{} calibration samples cannot fill {} bins; lower --bins or raise --split-fraction",
            data.len(),
            plan.bins
        )));
    }
    let v: Vec<f64> = data.iter().map(|s| s.v).collect();
    let bins = build_bins(&v, plan.bins, BinPolicy::EqualMass)?;
    if plan.kde.epochs == 0 {
        fit(&data, &bins, plan.mapping, &plan.hist, None)
    } else {
        fit_compositional(&data, &bins, plan.mapping, &plan.hist, &plan.kde)
    }
}

/// Splits, fits on the calibration part and evaluates on the rest.
pub fn calibrate(samples: &[EvalSample], plan: &CalibrationPlan) -> Result<Replication> {
    let (cal_idx, eval_idx) = split(samples.len(), &plan.split)?;
    if eval_idx.is_empty() {
        return Err(CalError::InsufficientData("the evaluation split is empty".into()));
    }
    let weights = fit_weights(&pick(samples, &cal_idx), plan)?;
    let report = evaluate_pipeline(Some(&weights), &pick(samples, &eval_idx), &plan.eval_config())?;
    Ok(Replication { weights, report, calibration: cal_idx, evaluation: eval_idx })
}

/// Evaluates `weights` on the samples at `indices` (all samples when `None`).
pub fn evaluate_subset(
    samples: &[EvalSample],
    indices: Option<&[usize]>,
    weights: Option<&AttenuationWeights>,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    match indices {
        Some(idx) => evaluate_pipeline(weights, &pick(samples, idx), cfg),
        None => evaluate_pipeline(weights, samples, cfg),
    }
}

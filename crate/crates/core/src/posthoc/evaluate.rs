use serde::{Deserialize, Serialize};

use crate::datamodel::ProbVector;
use crate::error::{CalError, Result};
use crate::metrics::{
    build_bins, ece, ece_kde_with_bandwidth, ks_error, BinPolicy, KdeConfig, ScoredSample, PROB_FLOOR,
};

use super::mapping::{apply_mapping, AttenuationWeights};
use super::train::CalibrationSample;

/// One evaluation sample: the aggregated prediction, the class it predicts
/// (which may differ from the plain argmax after accuracy-preserving
/// truth discovery), the label, and the sample's geometric variance.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub probs: ProbVector,
    pub predicted: usize,
    pub label: usize,
    pub hv: f64,
}

impl EvalSample {
    pub fn winning_score(&self) -> f64 {
        self.probs.get(self.predicted)
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }

    pub fn calibration_sample(&self) -> CalibrationSample {
        CalibrationSample { v: self.winning_score(), hv: self.hv, correct: self.correct() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub bins: usize,
    pub kde: KdeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub acc: f64,
    pub ece: f64,
    pub ece_kde: f64,
    pub ks: f64,
    pub nll: f64,
    pub brier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub before: MetricSet,
    pub after: MetricSet,
}

/// Replaces the predicted class's probability by `w` and rescales the
/// remaining mass proportionally.
pub fn with_confidence(probs: &ProbVector, predicted: usize, w: f64) -> ProbVector {
    let v = probs.get(predicted);
    let l = probs.len();
    let rest = 1.0 - v;
    let values = probs
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            if k == predicted {
                w
            } else if rest > 0.0 {
                p * (1.0 - w) / rest
            } else {
                (1.0 - w) / (l - 1) as f64
            }
        })
        .collect();
    ProbVector::from_trusted(values)
}

/// Confidence and correctness of each sample after the mapping.
pub fn mapped_scores(weights: Option<&AttenuationWeights>, samples: &[EvalSample]) -> Vec<ScoredSample> {
    samples
        .iter()
        .map(|s| {
            let v = s.winning_score();
            let conf = weights.map_or(v, |w| apply_mapping(v, s.hv, w));
            ScoredSample::new(conf, s.correct())
        })
        .collect()
}

/// Metrics of a set of scored predictions.
///
/// The histogram error uses equal-mass bins over the evaluated confidences
/// (capped at the sample count); the kernel error resolves its bandwidth on
/// the same confidences.
pub fn metric_set(scored: &[ScoredSample], probs: &[ProbVector], labels: &[usize], cfg: &EvalConfig) -> Result<MetricSet> {
    let n = scored.len();
    if n == 0 {
        return Err(CalError::InsufficientData("no evaluation samples".into()));
    }
    let conf: Vec<f64> = scored.iter().map(|s| s.confidence).collect();
    let bins = build_bins(&conf, cfg.bins.min(n), BinPolicy::EqualMass)?;
    let h = cfg.kde.resolve_bandwidth(&conf);
    let hits = scored.iter().filter(|s| s.correct).count();
    let mut nll = 0.0;
    let mut brier = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        nll -= p.get(y).max(PROB_FLOOR).ln();
        brier += p
            .as_slice()
            .iter()
            .enumerate()
            .map(|(l, &x)| if l == y { (x - 1.0) * (x - 1.0) } else { x * x })
            .sum::<f64>();
    }
    Ok(MetricSet {
        acc: hits as f64 / n as f64,
        ece: ece(scored, &bins)?,
        ece_kde: ece_kde_with_bandwidth(scored, &cfg.kde, h),
        ks: ks_error(scored)?,
        nll: nll / n as f64,
        brier: brier / n as f64,
    })
}

/// Metrics before and after applying `weights` (identity when `None`).
///
/// The mapping only rewrites the confidence of the predicted class, so
/// correctness and hence accuracy are unchanged.
pub fn evaluate_pipeline(weights: Option<&AttenuationWeights>, samples: &[EvalSample], cfg: &EvalConfig) -> Result<MetricReport> {
    cfg.kde.validate()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let before_scored = mapped_scores(None, samples);
    let before_probs: Vec<ProbVector> = samples.iter().map(|s| s.probs.clone()).collect();
    let before = metric_set(&before_scored, &before_probs, &labels, cfg)?;

    let after = match weights {
        None => before,
        Some(w) => {
            let scored = mapped_scores(Some(w), samples);
            let probs: Vec<ProbVector> = samples
                .iter()
                .zip(&scored)
                .map(|(s, m)| with_confidence(&s.probs, s.predicted, m.confidence))
                .collect();
            metric_set(&scored, &probs, &labels, cfg)?
        }
    };
    Ok(MetricReport { samples: samples.len(), before, after })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{BinningScheme, KdeConfig};
    use crate::posthoc::mapping::{Alpha2Mode, MappingConfig};

    fn sample(p: &[f64], label: usize, hv: f64) -> EvalSample {
        let probs = ProbVector::new(p.to_vec()).unwrap();
        let predicted = crate::datamodel::argmax_tiebreak(p, None);
        EvalSample { probs, predicted, label, hv }
    }

    fn cfg() -> EvalConfig {
        EvalConfig { bins: 15, kde: KdeConfig::for_classes(3) }
    }

    fn samples() -> Vec<EvalSample> {
        vec![
            sample(&[0.7, 0.2, 0.1], 0, 0.1),
            sample(&[0.3, 0.6, 0.1], 0, 0.4),
            sample(&[0.1, 0.1, 0.8], 2, 0.0),
            sample(&[0.5, 0.45, 0.05], 1, 0.2),
        ]
    }

    #[test]
    fn zero_weights_leave_metrics_unchanged() {
        let bins = BinningScheme::from_endpoints(vec![0.0, 0.5, 1.0], BinPolicy::EqualMass).unwrap();
        let w = AttenuationWeights::identity(bins, MappingConfig { alpha1: 1.0, alpha2_mode: Alpha2Mode::Zero });
        let r = evaluate_pipeline(Some(&w), &samples(), &cfg()).unwrap();
        assert_eq!(r.before, r.after);
        assert_eq!(evaluate_pipeline(None, &samples(), &cfg()).unwrap(), r);
    }

    #[test]
    fn mapping_keeps_accuracy() {
        let bins = BinningScheme::from_endpoints(vec![0.0, 0.65, 1.0], BinPolicy::EqualMass).unwrap();
        let w = AttenuationWeights::new(vec![0.3, 0.6], bins, MappingConfig::default()).unwrap();
        let r = evaluate_pipeline(Some(&w), &samples(), &cfg()).unwrap();
        assert_eq!(r.before.acc, r.after.acc);
        assert!(r.after.ks <= 1.0);
    }

    #[test]
    fn single_sample_report_is_complete() {
        let r = evaluate_pipeline(None, &samples()[..1], &cfg()).unwrap();
        for x in [r.before.acc, r.before.ece, r.before.ece_kde, r.before.ks, r.before.nll, r.before.brier] {
            assert!(x.is_finite());
        }
    }

    #[test]
    fn confidence_rewrite_stays_on_simplex() {
        let p = ProbVector::new(vec![0.6, 0.3, 0.1]).unwrap();
        let q = with_confidence(&p, 0, 0.4);
        assert!((q.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((q.get(1) - 0.45).abs() < 1e-15);
        let one = ProbVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        let q = with_confidence(&one, 0, 0.8);
        assert!((q.get(2) - 0.1).abs() < 1e-15);
    }
}

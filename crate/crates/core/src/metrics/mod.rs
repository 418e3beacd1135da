//! Calibration-quality measures.

mod binning;
mod kde;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datamodel::{argmax_tiebreak, ProbVector};
use crate::error::{CalError, Result};

pub use binning::{build_bins, BinAssignment, BinPolicy, BinningScheme};
pub use kde::{
    ece_kde, ece_kde_and_confidence_gradient, ece_kde_with_bandwidth, silverman_bandwidth, Bandwidth,
    KdeConfig, Kernel,
};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// A confidence together with whether its prediction was right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub confidence: f64,
    pub correct: bool,
}

impl ScoredSample {
    pub fn new(confidence: f64, correct: bool) -> Self {
        ScoredSample { confidence, correct }
    }
}

/// One row of a reliability diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub avg_conf: Option<f64>,
    pub acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityDiagram {
    pub rows: Vec<BinRow>,
    pub total: usize,
    /// Samples whose confidence fell outside the scheme's range.
    pub out_of_range: usize,
}

impl ReliabilityDiagram {
    /// Count-weighted mean of `|acc − conf|` over the rows.
    pub fn ece(&self) -> f64 {
        let n = self.total as f64;
        self.rows
            .iter()
            .filter_map(|r| match (r.acc, r.avg_conf) {
                (Some(a), Some(c)) => Some(r.count as f64 / n * (a - c).abs()),
                _ => None,
            })
            .sum()
    }

    /// CSV with header `bin_low,bin_high,count,avg_conf,acc`; empty bins
    /// leave the last two fields blank.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_low,bin_high,count,avg_conf,acc")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            writeln!(out, "{:.6},{:.6},{},{},{}", r.low, r.high, r.count, opt(r.avg_conf), opt(r.acc))?;
        }
        Ok(())
    }
}

/// Per-bin tabulation of confidences against accuracy.
pub fn reliability_diagram(samples: &[ScoredSample], bins: &BinningScheme) -> ReliabilityDiagram {
    let b = bins.num_bins();
    let mut counts = vec![0usize; b];
    let mut conf_sum = vec![0.0; b];
    let mut hits = vec![0usize; b];
    let mut out_of_range = 0;
    for s in samples {
        let a = bins.assign(s.confidence);
        if a.out_of_range {
            out_of_range += 1;
        }
        counts[a.index] += 1;
        conf_sum[a.index] += s.confidence;
        hits[a.index] += usize::from(s.correct);
    }
    let rows = (0..b)
        .map(|k| {
            let (low, high) = bins.bounds(k);
            let n = counts[k];
            let (avg_conf, acc) = if n == 0 {
                (None, None)
            } else {
                (Some(conf_sum[k] / n as f64), Some(hits[k] as f64 / n as f64))
            };
            BinRow { low, high, count: n, avg_conf, acc }
        })
        .collect();
    ReliabilityDiagram { rows, total: samples.len(), out_of_range }
}

/// Histogram expected calibration error `Σ_b (|P_b|/N) |ACC(P_b) − conf(P_b)|`.
pub fn ece(samples: &[ScoredSample], bins: &BinningScheme) -> Result<f64> {
    if samples.is_empty() {
        return Err(CalError::InsufficientData("ECE of an empty sample".into()));
    }
    Ok(reliability_diagram(samples, bins).ece())
}

/// Maximal gap between the cumulative accuracy and cumulative confidence
/// curves, with samples sorted by confidence.
///
/// Tied confidences are stepped over together so the value does not depend
/// on input order.
pub fn ks_error(samples: &[ScoredSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(CalError::InsufficientData("KS error of an empty sample".into()));
    }
    let mut sorted: Vec<ScoredSample> = samples.to_vec();
    sorted.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));
    let n = sorted.len() as f64;
    let mut acc = 0.0;
    let mut conf = 0.0;
    let mut worst: f64 = 0.0;
    for (k, s) in sorted.iter().enumerate() {
        acc += if s.correct { 1.0 } else { 0.0 };
        conf += s.confidence;
        let group_ends = sorted.get(k + 1).is_none_or(|t| t.confidence != s.confidence);
        if group_ends {
            worst = worst.max((acc / n - conf / n).abs());
        }
    }
    Ok(worst)
}

fn check_labels(probs: &[ProbVector], labels: &[usize]) -> Result<()> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(CalError::Shape(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(i) = probs.iter().zip(labels).position(|(p, &y)| y >= p.len()) {
        return Err(CalError::OutOfBounds { index: labels[i], len: probs[i].len() });
    }
    Ok(())
}

/// Mean negative log-likelihood of the labels, probabilities floored at
/// [`PROB_FLOOR`].
pub fn nll(probs: &[ProbVector], labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = probs.iter().zip(labels).map(|(p, &y)| -p.get(y).max(PROB_FLOOR).ln()).sum();
    Ok(total / probs.len() as f64)
}

/// Mean squared distance to the one-hot label.
pub fn brier(probs: &[ProbVector], labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            p.as_slice()
                .iter()
                .enumerate()
                .map(|(l, &x)| {
                    let t = if l == y { 1.0 } else { 0.0 };
                    (x - t) * (x - t)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Top-1 accuracy with ties going to the smallest index.
pub fn accuracy(probs: &[ProbVector], labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| argmax_tiebreak(p.as_slice(), None) == y)
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn s(confidence: f64, correct: bool) -> ScoredSample {
        ScoredSample { confidence, correct }
    }

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ece_hand_example() {
        let bins = BinningScheme::from_endpoints(vec![0.5, 0.8, 1.0], BinPolicy::EqualMass).unwrap();
        let samples = [s(0.6, true), s(0.7, false), s(0.9, true), s(0.95, true)];
        assert_abs_diff_eq!(ece(&samples, &bins).unwrap(), 0.1125, epsilon = 1e-15);
    }

    #[test]
    fn ece_zero_cases() {
        let bins = BinningScheme::from_endpoints(vec![0.0, 0.5, 1.0], BinPolicy::EqualWidth).unwrap();
        assert_eq!(ece(&[s(1.0, true); 4], &bins).unwrap(), 0.0);
        let samples = [s(0.6, true), s(0.9, true), s(0.75, false), s(0.75, true)];
        assert_abs_diff_eq!(ece(&samples, &bins).unwrap(), 0.0, epsilon = 1e-15);
        assert!(ece(&[], &bins).is_err());
    }

    #[test]
    fn out_of_range_goes_to_end_bins() {
        let bins = BinningScheme::from_endpoints(vec![0.5, 0.8, 1.0], BinPolicy::EqualMass).unwrap();
        let d = reliability_diagram(&[s(0.1, false), s(0.9, true)], &bins);
        assert_eq!(d.out_of_range, 1);
        assert_eq!(d.rows[0].count, 1);
    }

    #[test]
    fn diagram_rows() {
        let bins = BinningScheme::from_endpoints(vec![0.0, 0.5, 1.0], BinPolicy::EqualWidth).unwrap();
        let d = reliability_diagram(&[s(0.7, true), s(0.9, false)], &bins);
        assert_eq!(d.rows[0].count, 0);
        assert_eq!(d.rows[0].acc, None);
        assert_eq!(d.rows[0].avg_conf, None);

        let single = BinningScheme::from_endpoints(vec![0.0, 1.0], BinPolicy::EqualWidth).unwrap();
        let samples = [s(0.7, true), s(0.9, false), s(0.2, true)];
        let d = reliability_diagram(&samples, &single);
        assert_abs_diff_eq!(d.rows[0].acc.unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.rows[0].avg_conf.unwrap(), 0.6, epsilon = 1e-15);

        let mut buf = Vec::new();
        reliability_diagram(&[s(0.7, true), s(0.9, false)], &bins).write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "bin_low,bin_high,count,avg_conf,acc\n0.000000,0.500000,0,,\n0.500000,1.000000,2,0.800000,0.500000\n"
        );
    }

    #[test]
    fn ks_examples() {
        assert_abs_diff_eq!(ks_error(&[s(0.6, true), s(0.9, true)]).unwrap(), 0.25, epsilon = 1e-15);
        assert_eq!(ks_error(&[s(1.0, true)]).unwrap(), 0.0);
        assert_eq!(ks_error(&[s(0.0, false), s(1.0, true)]).unwrap(), 0.0);
    }

    #[test]
    fn nll_examples() {
        assert_eq!(nll(&[pv(&[1.0, 0.0])], &[0]).unwrap(), 0.0);
        assert_abs_diff_eq!(nll(&[pv(&[0.5, 0.5])], &[1]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let v = nll(&[pv(&[1.0, 0.0])], &[1]).unwrap();
        assert!(v <= -PROB_FLOOR.ln() + 1e-12 && v.is_finite());
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&[pv(&[0.0, 1.0])], &[1]).unwrap(), 0.0);
        assert_abs_diff_eq!(brier(&[pv(&[0.5, 0.5])], &[0]).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(brier(&[pv(&[1.0, 0.0])], &[1]).unwrap(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn accuracy_examples() {
        let p = [pv(&[0.9, 0.1]), pv(&[0.2, 0.8])];
        assert_eq!(accuracy(&p, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&p, &[1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&p, &[0, 0]).unwrap(), 0.5);
        assert!(accuracy(&p, &[0, 5]).is_err());
    }

    fn samples_strategy() -> impl Strategy<Value = Vec<ScoredSample>> {
        prop::collection::vec((0.0f64..=1.0, any::<bool>()), 2..200)
            .prop_map(|v| v.into_iter().map(|(c, ok)| s(c, ok)).collect())
    }

    proptest! {
        #[test]
        fn diagram_reproduces_ece(samples in samples_strategy(), b in 1usize..16) {
            let conf: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
            prop_assume!(conf.len() >= b);
            let bins = build_bins(&conf, b, BinPolicy::EqualMass).unwrap();
            let d = reliability_diagram(&samples, &bins);
            prop_assert_eq!(d.ece(), ece(&samples, &bins).unwrap());
            prop_assert_eq!(d.rows.iter().map(|r| r.count).sum::<usize>(), samples.len());
        }

        #[test]
        fn ece_and_ks_are_permutation_invariant(samples in samples_strategy(), k in 0usize..200) {
            let mut rotated = samples.clone();
            let k = k % rotated.len();
            rotated.rotate_left(k);
            let bins = BinningScheme::from_endpoints(vec![0.0, 0.3, 0.6, 1.0], BinPolicy::EqualWidth).unwrap();
            prop_assert!((ece(&samples, &bins).unwrap() - ece(&rotated, &bins).unwrap()).abs() < 1e-12);
            prop_assert!((ks_error(&samples).unwrap() - ks_error(&rotated).unwrap()).abs() < 1e-12);
            let cfg = KdeConfig::default();
            prop_assert!((ece_kde(&samples, &cfg).unwrap() - ece_kde(&rotated, &cfg).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn ks_is_bounded(samples in samples_strategy()) {
            let v = ks_error(&samples).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

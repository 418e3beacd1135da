//! Core numeric types shared by every stage of the toolkit.
//!
//! A [`ProbVector`] is one point on the probability simplex. An
//! [`EnsembleTensor`] holds `S` such points for each of `N` samples together
//! with the integer labels, stored sample-major so that the `S` source
//! predictions of one sample are contiguous.

use serde::{Deserialize, Serialize};

use crate::error::{CalError, Result};

/// Tolerance used when validating simplex membership.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Largest violation that is silently repaired by renormalizing.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;

/// Two components closer than this are treated as tied by [`argmax_tiebreak`].
pub const TIE_TOLERANCE: f64 = 1e-12;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

/// Outcome of validating raw values as a probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validation {
    Exact,
    Renormalized,
}

impl ProbVector {
    /// Strict constructor: fails unless the values already lie on the simplex
    /// within [`SIMPLEX_TOLERANCE`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        if values.len() < 2 {
            return Err(CalError::NotOnSimplex(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        let (lo, hi, sum) = stats(&values);
        if lo < -SIMPLEX_TOLERANCE || hi > 1.0 + SIMPLEX_TOLERANCE || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(CalError::NotOnSimplex(format!(
                "components in [{lo}, {hi}], sum {sum}"
            )));
        }
        Ok(ProbVector(values))
    }

    /// Lenient constructor used at ingestion. Violations up to
    /// [`RENORMALIZE_TOLERANCE`] are repaired by clipping negatives and
    /// dividing by the sum; the second value reports whether that happened.
    pub fn from_raw(mut values: Vec<f64>) -> Result<(Self, Validation)> {
        check_finite(&values)?;
        if values.len() < 2 {
            return Err(CalError::NotOnSimplex(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        let (lo, hi, sum) = stats(&values);
        let violation = (-lo).max(hi - 1.0).max((sum - 1.0).abs());
        if violation <= SIMPLEX_TOLERANCE {
            return Ok((ProbVector(values), Validation::Exact));
        }
        if violation > RENORMALIZE_TOLERANCE {
            return Err(CalError::NotOnSimplex(format!(
                "components in [{lo}, {hi}], sum {sum}"
            )));
        }
        for x in values.iter_mut() {
            *x = x.max(0.0);
        }
        let total: f64 = values.iter().sum();
        for x in values.iter_mut() {
            *x /= total;
        }
        Ok((ProbVector(values), Validation::Renormalized))
    }

    /// Wraps values the caller has constructed as a convex combination of
    /// simplex points.
    pub(crate) fn from_trusted(values: Vec<f64>) -> Self {
        debug_assert!(values.len() >= 2);
        debug_assert!((values.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        ProbVector(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    /// The winning score `max_l z_l`.
    pub fn winning_score(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn squared_distance(&self, other: &ProbVector) -> f64 {
        squared_distance(&self.0, &other.0)
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(CalError::NonFinite { index, value: values[index] }),
        None => Ok(()),
    }
}

fn stats(values: &[f64]) -> (f64, f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi, values.iter().sum())
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    check_finite(logits)?;
    if logits.len() < 2 {
        return Err(CalError::NotOnSimplex(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// Index of the largest component.
///
/// Components within [`TIE_TOLERANCE`] of the maximum are tied. When `prefer`
/// is among the tied indices it wins; otherwise the smallest tied index does.
pub fn argmax_tiebreak(z: &[f64], prefer: Option<usize>) -> usize {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if let Some(c) = prefer {
        if c < z.len() && z[c] >= max - TIE_TOLERANCE {
            return c;
        }
    }
    z.iter()
        .position(|&x| x >= max - TIE_TOLERANCE)
        .unwrap_or(0)
}

/// Per-sample scoring outcome of a prediction against its label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub winning_score: f64,
    pub predicted_class: usize,
    pub correct: bool,
}

impl PredictionOutcome {
    pub fn new(z: &ProbVector, label: usize, prefer: Option<usize>) -> Self {
        let predicted_class = argmax_tiebreak(z.as_slice(), prefer);
        PredictionOutcome {
            winning_score: z.winning_score(),
            predicted_class,
            correct: predicted_class == label,
        }
    }
}

/// `S` source predictions for each of `N` samples over `L` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTensor {
    num_classes: usize,
    source_ids: Vec<String>,
    // sample-major: predictions[i * S + s]
    predictions: Vec<ProbVector>,
    labels: Vec<usize>,
}

impl EnsembleTensor {
    /// Builds a tensor from per-source prediction lists (`by_source[s][i]`).
    pub fn from_sources(
        source_ids: Vec<String>,
        by_source: Vec<Vec<ProbVector>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let num_sources = by_source.len();
        if num_sources == 0 || source_ids.len() != num_sources {
            return Err(CalError::Shape(format!(
                "{} source ids for {} sources (need at least one)",
                source_ids.len(),
                num_sources
            )));
        }
        let n = labels.len();
        if n == 0 {
            return Err(CalError::Shape("ensemble has no samples".into()));
        }
        let num_classes = by_source[0].first().map(ProbVector::len).unwrap_or(0);
        if num_classes < 2 {
            return Err(CalError::Shape(format!("need at least 2 classes, got {num_classes}")));
        }
        for (s, preds) in by_source.iter().enumerate() {
            if preds.len() != n {
                return Err(CalError::Shape(format!(
                    "source {} has {} samples, labels have {}",
                    source_ids[s],
                    preds.len(),
                    n
                )));
            }
            if let Some(i) = preds.iter().position(|p| p.len() != num_classes) {
                return Err(CalError::Shape(format!(
                    "source {} sample {} has {} classes, expected {}",
                    source_ids[s],
                    i,
                    preds[i].len(),
                    num_classes
                )));
            }
        }
        if let Some(i) = labels.iter().position(|&y| y >= num_classes) {
            return Err(CalError::Shape(format!(
                "label {} of sample {} out of range for {} classes",
                labels[i], i, num_classes
            )));
        }
        let mut columns: Vec<std::vec::IntoIter<ProbVector>> =
            by_source.into_iter().map(Vec::into_iter).collect();
        let mut predictions = Vec::with_capacity(n * num_sources);
        for _ in 0..n {
            for col in columns.iter_mut() {
                predictions.push(col.next().expect("length checked"));
            }
        }
        Ok(EnsembleTensor { num_classes, source_ids, predictions, labels })
    }

    pub fn num_sources(&self) -> usize {
        self.source_ids.len()
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The `S` source predictions of one sample.
    pub fn sample(&self, i: usize) -> &[ProbVector] {
        let s = self.num_sources();
        &self.predictions[i * s..(i + 1) * s]
    }

    pub fn prediction(&self, source: usize, sample: usize) -> &ProbVector {
        &self.predictions[sample * self.num_sources() + source]
    }

    /// Predictions of a single source across all samples.
    pub fn source_predictions(&self, source: usize) -> Vec<ProbVector> {
        (0..self.num_samples())
            .map(|i| self.prediction(source, i).clone())
            .collect()
    }

    /// Restricts the tensor to a subset of samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let s = self.num_sources();
        let mut predictions = Vec::with_capacity(indices.len() * s);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.num_samples() {
                return Err(CalError::OutOfBounds { index: i, len: self.num_samples() });
            }
            predictions.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        if labels.is_empty() {
            return Err(CalError::Shape("selection is empty".into()));
        }
        Ok(EnsembleTensor {
            num_classes: self.num_classes,
            source_ids: self.source_ids.clone(),
            predictions,
            labels,
        })
    }
}

/// Componentwise mean of the `S` source predictions of one sample.
pub fn ensemble_mean(ens: &EnsembleTensor, sample: usize) -> Result<ProbVector> {
    if sample >= ens.num_samples() {
        return Err(CalError::OutOfBounds { index: sample, len: ens.num_samples() });
    }
    Ok(mean_of(ens.sample(sample)))
}

/// Ensemble mean of every sample, in sample order.
pub fn ensemble_means(ens: &EnsembleTensor) -> Vec<ProbVector> {
    (0..ens.num_samples()).map(|i| mean_of(ens.sample(i))).collect()
}

pub(crate) fn mean_of(sources: &[ProbVector]) -> ProbVector {
    let l = sources[0].len();
    let mut acc = vec![0.0; l];
    for z in sources {
        for (a, x) in acc.iter_mut().zip(z.as_slice()) {
            *a += x;
        }
    }
    let k = sources.len() as f64;
    ProbVector::from_trusted(acc.into_iter().map(|a| a / k).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn tensor(by_source: Vec<Vec<Vec<f64>>>, labels: Vec<usize>) -> EnsembleTensor {
        let ids = (0..by_source.len()).map(|s| format!("s{s}")).collect();
        let preds = by_source
            .into_iter()
            .map(|rows| rows.into_iter().map(|r| pv(&r)).collect())
            .collect();
        EnsembleTensor::from_sources(ids, preds, labels).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);

        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p.get(0), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(1), 1.0 / 3.0, epsilon = 1e-15);

        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p.get(0), 1.0);
        assert!(p.get(1) < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite_with_index() {
        match softmax(&[0.0, 1.0, f64::NAN]) {
            Err(CalError::NonFinite { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ensemble_mean_examples() {
        let ens = tensor(vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]], vec![0]);
        assert_eq!(ensemble_mean(&ens, 0).unwrap().as_slice(), &[0.5, 0.5]);

        let ens = tensor(vec![vec![vec![0.7, 0.3]]], vec![0]);
        assert_eq!(ensemble_mean(&ens, 0).unwrap().as_slice(), &[0.7, 0.3]);

        let ens = tensor(
            vec![vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
            vec![1],
        );
        let m = ensemble_mean(&ens, 0).unwrap();
        assert_abs_diff_eq!(m.get(0), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.get(1), 1.0 / 3.0, epsilon = 1e-15);

        assert!(matches!(ensemble_mean(&ens, 1), Err(CalError::OutOfBounds { .. })));
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_tiebreak(&[0.2, 0.5, 0.3], None), 1);
        assert_eq!(argmax_tiebreak(&[0.4, 0.4, 0.2], Some(1)), 1);
        assert_eq!(argmax_tiebreak(&[0.4, 0.4, 0.2], None), 0);
        // prefer outside the tie is ignored
        assert_eq!(argmax_tiebreak(&[0.4, 0.4, 0.2], Some(2)), 0);
    }

    #[test]
    fn renormalization_window() {
        let (p, v) = ProbVector::from_raw(vec![0.5, 0.5 + 5e-7]).unwrap();
        assert_eq!(v, Validation::Renormalized);
        assert_abs_diff_eq!(p.as_slice().iter().sum::<f64>(), 1.0, epsilon = 1e-15);

        let (_, v) = ProbVector::from_raw(vec![0.25, 0.75]).unwrap();
        assert_eq!(v, Validation::Exact);

        assert!(ProbVector::from_raw(vec![0.5, 0.51]).is_err());
        assert!(ProbVector::new(vec![0.5, 0.5 + 5e-7]).is_err());
        assert!(ProbVector::new(vec![1.0]).is_err());
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        let ids = vec!["a".to_string()];
        assert!(EnsembleTensor::from_sources(ids.clone(), vec![vec![pv(&[0.5, 0.5])]], vec![2]).is_err());
        assert!(EnsembleTensor::from_sources(ids.clone(), vec![vec![]], vec![]).is_err());
        assert!(EnsembleTensor::from_sources(vec![], vec![], vec![0]).is_err());
        let ens = EnsembleTensor::from_sources(ids, vec![vec![pv(&[0.5, 0.5]), pv(&[0.1, 0.9])]], vec![0, 1]).unwrap();
        assert_eq!(ens.select(&[1]).unwrap().prediction(0, 0).as_slice(), &[0.1, 0.9]);
    }

    proptest! {
        #[test]
        fn softmax_is_on_simplex(logits in prop::collection::vec(-500.0f64..500.0, 2..12)) {
            let p = softmax(&logits).unwrap();
            prop_assert!(ProbVector::new(p.clone().into_inner()).is_ok());
            for i in 0..logits.len() {
                for j in 0..logits.len() {
                    if logits[i] > logits[j] {
                        prop_assert!(p.get(i) >= p.get(j));
                    }
                }
            }
        }

        #[test]
        fn softmax_is_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 2..8), shift in -50.0f64..50.0) {
            let a = softmax(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|x| x - shift).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn ensemble_mean_commutes_with_source_permutation(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..6),
            rot in 0usize..6,
        ) {
            let sources: Vec<Vec<Vec<f64>>> = rows
                .iter()
                .map(|r| vec![softmax(r).unwrap().into_inner()])
                .collect();
            let mut rotated = sources.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let a = ensemble_mean(&tensor(sources, vec![0]), 0).unwrap();
            let b = ensemble_mean(&tensor(rotated, vec![0]), 0).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }

        #[test]
        fn argmax_prefers_tied_class(raw in prop::collection::vec(0.0f64..1.0, 2..8), c in 0usize..8) {
            let c = c % raw.len();
            let mut z = raw.clone();
            let max = z.iter().copied().fold(0.0, f64::max);
            z[c] = max;
            prop_assert_eq!(argmax_tiebreak(&z, Some(c)), c);
        }
    }
}

//! Geometric truth discovery on the probability simplex.
//!
//! For one sample with source predictions `z_1..z_S`, truth discovery looks
//! for a consensus point `z*` and per-source reliabilities `ω_s` minimizing
//! `Σ_s ω_s ||z* − z_s||²` subject to `Σ_s e^{−ω_s} = 1`. The solver
//! alternates the closed-form reliability update with a reliability-weighted
//! mean, starting from the ensemble mean. The accuracy-preserving variant
//! additionally projects every intermediate truth vector back onto the region
//! of the simplex where the ensemble's predicted class is still the argmax.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{argmax_tiebreak, mean_of, EnsembleTensor, ProbVector};
use crate::error::{CalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    AccuracyPreserving,
}

/// Exponent applied to the source distance in the denominator of the
/// reliability update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceExponent {
    /// `ln(Σ_t d_t² / ||z* − z_s||)`, the form printed in the original listing.
    Unsquared,
    /// `ln(Σ_t d_t² / d_s²)`, the exact constrained minimizer.
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthConfig {
    /// Convergence threshold on the squared displacement of the truth vector.
    pub epsilon: f64,
    pub max_iters: usize,
    pub variant: Variant,
    pub distance_exponent: DistanceExponent,
    pub distance_floor: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig {
            epsilon: (-8.0f64).exp(),
            max_iters: 50,
            variant: Variant::AccuracyPreserving,
            distance_exponent: DistanceExponent::Squared,
            distance_floor: 1e-12,
        }
    }
}

impl TruthConfig {
    pub fn vanilla() -> Self {
        TruthConfig { variant: Variant::Vanilla, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || self.max_iters == 0 || !(self.distance_floor > 0.0) {
            return Err(CalError::InvalidConfig(format!(
                "truth discovery needs epsilon > 0, max_iters >= 1, distance_floor > 0 (got {}, {}, {})",
                self.epsilon, self.max_iters, self.distance_floor
            )));
        }
        Ok(())
    }
}

/// Reliabilities from one update, with the number of clamped distances.
#[derive(Debug, Clone, PartialEq)]
pub struct Reliabilities {
    pub omega: Vec<f64>,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthResult {
    pub truth_vector: ProbVector,
    /// Class predicted from the truth vector. For the accuracy-preserving
    /// variant ties are resolved toward the ensemble's class.
    pub predicted_class: usize,
    pub reliabilities: Vec<f64>,
    pub uncertainties: Vec<f64>,
    pub hv: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    /// Largest `|Σ e^{−ω_s} − 1|` over the reliability updates that did not
    /// clamp any distance.
    pub max_constraint_residual: f64,
    pub clamped_distances: usize,
}

/// `Σ_s ω_s ||z* − z_s||²`.
pub fn td_objective(truth: &ProbVector, sources: &[ProbVector], reliabilities: &[f64]) -> f64 {
    sources
        .iter()
        .zip(reliabilities)
        .map(|(z, w)| w * truth.squared_distance(z))
        .sum()
}

/// Closed-form reliabilities for a fixed truth vector.
///
/// Squared distances below `distance_floor` are raised to it before forming
/// the ratio, which keeps every weight finite when a source sits on the truth.
pub fn update_reliabilities(truth: &ProbVector, sources: &[ProbVector], cfg: &TruthConfig) -> Reliabilities {
    let floor = cfg.distance_floor;
    let mut clamped = 0;
    let sq: Vec<f64> = sources
        .iter()
        .map(|z| {
            let d = truth.squared_distance(z);
            if d < floor {
                clamped += 1;
                floor
            } else {
                d
            }
        })
        .collect();
    let total: f64 = sq.iter().sum();
    let omega = sq
        .iter()
        .map(|&d2| {
            let denom = match cfg.distance_exponent {
                DistanceExponent::Squared => d2,
                DistanceExponent::Unsquared => d2.sqrt().max(floor),
            };
            (total / denom).ln()
        })
        .collect();
    Reliabilities { omega, clamped }
}

/// Reliability-weighted mean of the sources.
pub fn update_truth(sources: &[ProbVector], reliabilities: &[f64]) -> Result<ProbVector> {
    let total: f64 = reliabilities.iter().sum();
    if !(total > 0.0) {
        return Err(CalError::DegenerateReliabilities { sum: total });
    }
    // offsets from the first source
    let base = sources[0].as_slice();
    let mut acc = vec![0.0; base.len()];
    for (z, &w) in sources.iter().zip(reliabilities).skip(1) {
        for ((a, x), b) in acc.iter_mut().zip(z.as_slice()).zip(base) {
            *a += w * (x - b);
        }
    }
    for (a, b) in acc.iter_mut().zip(base) {
        *a = b + *a / total;
    }
    ProbVector::new(acc).map_err(|_| CalError::DegenerateReliabilities { sum: total })
}

/// Euclidean projection onto the closed region of the simplex where class
/// `c` is (weakly) the largest component.
///
/// The components strictly above `z_c` are visited in descending order and
/// pooled with `z_c` until the pooled mean exceeds the next unpooled
/// component; every pooled entry is then set to that mean. Pooled entries end
/// up exactly equal, so the caller resolves the tie with
/// `argmax_tiebreak(.., Some(c))`.
pub fn project_accuracy_preserving(z: &ProbVector, c: usize) -> ProbVector {
    let values = z.as_slice();
    if argmax_tiebreak(values, Some(c)) == c {
        return z.clone();
    }
    let mut others: Vec<usize> = (0..values.len()).filter(|&l| l != c).collect();
    // stable: equal components keep index order
    others.sort_by(|&a, &b| values[b].total_cmp(&values[a]));

    let mut sum = values[c];
    let mut pooled = 0;
    let mut mean = sum;
    for (k, &idx) in others.iter().enumerate() {
        sum += values[idx];
        pooled = k + 1;
        mean = sum / (pooled + 1) as f64;
        let next = others.get(k + 1).map_or(f64::NEG_INFINITY, |&j| values[j]);
        if mean > next {
            break;
        }
    }
    let mut out = values.to_vec();
    out[c] = mean;
    for &idx in &others[..pooled] {
        out[idx] = mean;
    }
    ProbVector::from_trusted(out)
}

/// Entropy-weighted geometric variance `H·V` of the sources around `truth`.
pub fn entropy_geometric_variance(truth: &ProbVector, sources: &[ProbVector]) -> f64 {
    let sq: Vec<f64> = sources.iter().map(|z| truth.squared_distance(z)).collect();
    let total: f64 = sq.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let entropy: f64 = sq
        .iter()
        .filter(|&&d| d > 0.0)
        .map(|&d| {
            let q = d / total;
            -q * q.ln()
        })
        .sum();
    (entropy * total).max(0.0)
}

/// Runs truth discovery for one sample.
pub fn discover_truth(sources: &[ProbVector], cfg: &TruthConfig) -> Result<TruthResult> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(CalError::Shape("truth discovery needs at least one source".into()));
    }
    let ensemble = mean_of(sources);
    let ensemble_class = argmax_tiebreak(ensemble.as_slice(), None);
    let prefer = match cfg.variant {
        Variant::Vanilla => None,
        Variant::AccuracyPreserving => Some(ensemble_class),
    };

    // A lone source is its own truth; every reliability ratio is 1.
    if sources.len() == 1 {
        return Ok(TruthResult {
            predicted_class: ensemble_class,
            truth_vector: ensemble,
            reliabilities: vec![0.0],
            uncertainties: vec![1.0],
            hv: 0.0,
            iterations_used: 0,
            converged: true,
            objective_trace: Vec::new(),
            max_constraint_residual: 0.0,
            clamped_distances: 0,
        });
    }

    let mut truth = ensemble;
    let mut trace = Vec::new();
    let mut residual: f64 = 0.0;
    let mut clamped_total = 0;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        iterations += 1;
        let rel = update_reliabilities(&truth, sources, cfg);
        clamped_total += rel.clamped;
        if rel.clamped == 0 {
            let s: f64 = rel.omega.iter().map(|w| (-w).exp()).sum();
            residual = residual.max((s - 1.0).abs());
        }
        let mut next = update_truth(sources, &rel.omega)?;
        if cfg.variant == Variant::AccuracyPreserving {
            next = project_accuracy_preserving(&next, ensemble_class);
        }
        trace.push(td_objective(&next, sources, &rel.omega));
        let moved = next.squared_distance(&truth);
        truth = next;
        if moved < cfg.epsilon {
            converged = true;
            break;
        }
    }

    let final_rel = update_reliabilities(&truth, sources, cfg);
    let uncertainties = final_rel.omega.iter().map(|w| (-w).exp()).collect();
    let hv = entropy_geometric_variance(&truth, sources);
    Ok(TruthResult {
        predicted_class: argmax_tiebreak(truth.as_slice(), prefer),
        truth_vector: truth,
        reliabilities: final_rel.omega,
        uncertainties,
        hv,
        iterations_used: iterations,
        converged,
        objective_trace: trace,
        max_constraint_residual: residual,
        clamped_distances: clamped_total,
    })
}

/// Runs [`discover_truth`] independently over a batch of samples.
///
/// Results are returned positionally; failures are gathered with their
/// sample indices.
pub fn discover_batch<S>(samples: &[S], cfg: &TruthConfig) -> Result<Vec<TruthResult>>
where
    S: AsRef<[ProbVector]> + Sync,
{
    cfg.validate()?;
    let outcomes: Vec<Result<TruthResult>> = samples
        .par_iter()
        .map(|s| discover_truth(s.as_ref(), cfg))
        .collect();
    let mut results = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (i, r) in outcomes.into_iter().enumerate() {
        match r {
            Ok(t) => results.push(t),
            Err(e) => failures.push((i, e)),
        }
    }
    if failures.is_empty() {
        Ok(results)
    } else {
        Err(CalError::SampleFailures(failures))
    }
}

/// Truth discovery for every sample of an ensemble.
pub fn discover_all(ens: &EnsembleTensor, cfg: &TruthConfig) -> Result<Vec<TruthResult>> {
    let samples: Vec<&[ProbVector]> = (0..ens.num_samples()).map(|i| ens.sample(i)).collect();
    discover_batch(&samples, cfg)
}

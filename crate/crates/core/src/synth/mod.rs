//! Synthetic ensembles and scored samples with known calibration behaviour.

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{softmax, EnsembleTensor, ProbVector};
use crate::error::{CalError, Result};
use crate::metrics::ScoredSample;
use crate::posthoc::CalibrationSample;

pub use oracle::{oracle_ece, oracle_projection};

/// Smallest probability passed to the logarithm when distorting `p`.
const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_samples: usize,
    pub num_classes: usize,
    pub num_sources: usize,
    pub dirichlet_concentration: f64,
    /// One shared distortion temperature, or one per source.
    pub distortion_temperature: Vec<f64>,
    pub source_noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_samples: 10_000,
            num_classes: 10,
            num_sources: 20,
            dirichlet_concentration: 0.3,
            distortion_temperature: vec![0.5],
            source_noise_scale: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 || self.num_sources == 0 || self.num_classes < 2 {
            return Err(CalError::InvalidConfig(format!(
                "need N >= 1, S >= 1, L >= 2 (got {}, {}, {})",
                self.num_samples, self.num_sources, self.num_classes
            )));
        }
        if !(self.dirichlet_concentration > 0.0 && self.dirichlet_concentration.is_finite()) {
            return Err(CalError::InvalidConfig(format!(
                "dirichlet concentration must be positive, got {}",
                self.dirichlet_concentration
            )));
        }
        let t = &self.distortion_temperature;
        if t.len() != 1 && t.len() != self.num_sources {
            return Err(CalError::InvalidConfig(format!(
                "{} distortion temperatures for {} sources",
                t.len(),
                self.num_sources
            )));
        }
        if t.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(CalError::InvalidConfig("distortion temperatures must be positive".into()));
        }
        if !(self.source_noise_scale >= 0.0 && self.source_noise_scale.is_finite()) {
            return Err(CalError::InvalidConfig(format!(
                "noise scale must be non-negative, got {}",
                self.source_noise_scale
            )));
        }
        Ok(())
    }

    fn temperature(&self, source: usize) -> f64 {
        if self.distortion_temperature.len() == 1 {
            self.distortion_temperature[0]
        } else {
            self.distortion_temperature[source]
        }
    }
}

/// Random stream for sample `i`, independent of how work is scheduled.
pub fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn dirichlet<R: Rng>(rng: &mut R, alpha: f64, l: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let mut g: Vec<f64> = (0..l).map(|_| gamma.sample(rng)).collect();
    let total: f64 = g.iter().sum();
    if total > 0.0 && total.is_finite() {
        g.iter_mut().for_each(|x| *x /= total);
    } else {
        g.iter_mut().for_each(|x| *x = 1.0 / l as f64);
    }
    g
}

fn categorical<R: Rng>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

struct GeneratedSample {
    truth: Vec<f64>,
    label: usize,
    sources: Vec<ProbVector>,
}

fn generate_sample(spec: &SynthSpec, i: usize) -> GeneratedSample {
    let mut rng = sample_rng(spec.seed, i);
    let truth = dirichlet(&mut rng, spec.dirichlet_concentration, spec.num_classes);
    let label = categorical(&mut rng, &truth);
    let log_p: Vec<f64> = truth.iter().map(|x| x.max(LOG_FLOOR).ln()).collect();
    let sources = (0..spec.num_sources)
        .map(|s| {
            let tau = spec.temperature(s);
            let logits: Vec<f64> = log_p
                .iter()
                .map(|lp| {
                    let eps: f64 = rng.sample(StandardNormal);
                    lp / tau + spec.source_noise_scale * eps
                })
                .collect();
            softmax(&logits).expect("finite logits")
        })
        .collect();
    GeneratedSample { truth, label, sources }
}

/// A synthetic ensemble together with the class distributions it was drawn from.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub ensemble: EnsembleTensor,
    pub true_distributions: Vec<Vec<f64>>,
}

/// Draws `p_i ~ Dir(α)`, `y_i ~ p_i` and source predictions
/// `softmax(ln p_i / τ_s + noise·ε)`.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let drawn: Vec<GeneratedSample> =
        (0..spec.num_samples).into_par_iter().map(|i| generate_sample(spec, i)).collect();
    let mut by_source: Vec<Vec<ProbVector>> =
        (0..spec.num_sources).map(|_| Vec::with_capacity(spec.num_samples)).collect();
    let mut labels = Vec::with_capacity(spec.num_samples);
    let mut true_distributions = Vec::with_capacity(spec.num_samples);
    for g in drawn {
        labels.push(g.label);
        true_distributions.push(g.truth);
        for (s, p) in g.sources.into_iter().enumerate() {
            by_source[s].push(p);
        }
    }
    let ids = (0..spec.num_sources).map(|s| format!("source_{s}")).collect();
    let ensemble = EnsembleTensor::from_sources(ids, by_source, labels)?;
    Ok(SynthData { ensemble, true_distributions })
}

/// Confidences `w ~ U(0, 1)` with correctness drawn as Bernoulli(w).
pub fn calibrated_scores(n: usize, seed: u64) -> Vec<ScoredSample> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let w: f64 = rng.random();
            let u: f64 = rng.random();
            ScoredSample::new(w, u < w)
        })
        .collect()
}

/// Winning scores `v ~ U(low, 1)` that are right with probability `v − offset`.
pub fn offset_scores(n: usize, low: f64, offset: f64, seed: u64) -> Vec<CalibrationSample> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let v: f64 = rng.random_range(low..1.0);
            let u: f64 = rng.random();
            CalibrationSample { v, hv: 0.0, correct: u < v - offset }
        })
        .collect()
}

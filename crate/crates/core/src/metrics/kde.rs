//! Kernel-density calibration error.
//!
//! With `P̃(w) = (1/(N h)) Σ_i K((w − w_i)/h)` and
//! `ÃCC(w) = Σ_i c_i K(..) / Σ_i K(..)`, the integrand `|w − ÃCC(w)|·P̃(w)`
//! equals `|(1/(N h)) Σ_i (w − c_i) K((w − w_i)/h)|`. Both the loss and its
//! gradient are evaluated in that form on a uniform trapezoid grid.

use serde::{Deserialize, Serialize};

use crate::error::{CalError, Result};

use super::ScoredSample;

/// Kernel sums below this are treated as "no data here".
const DENSITY_UNDERFLOW: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Triweight,
    Gaussian,
}

impl Kernel {
    pub fn value(self, u: f64) -> f64 {
        match self {
            Kernel::Triweight => {
                let t = 1.0 - u * u;
                if t <= 0.0 {
                    0.0
                } else {
                    35.0 / 32.0 * t * t * t
                }
            }
            Kernel::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        }
    }

    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Kernel::Triweight => {
                let t = 1.0 - u * u;
                if t <= 0.0 {
                    0.0
                } else {
                    -105.0 / 16.0 * u * t * t
                }
            }
            Kernel::Gaussian => -u * self.value(u),
        }
    }

    /// Half-width of the support in units of `h`.
    fn reach(self) -> f64 {
        match self {
            Kernel::Triweight => 1.0,
            Kernel::Gaussian => 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// `1.06 · σ̂ · N^{-1/5}`, floored at `1e-3`.
    Silverman,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeConfig {
    pub kernel: Kernel,
    pub bandwidth: Bandwidth,
    pub grid_points: usize,
    pub range: (f64, f64),
}

impl Default for KdeConfig {
    fn default() -> Self {
        KdeConfig { kernel: Kernel::Triweight, bandwidth: Bandwidth::Silverman, grid_points: 512, range: (0.0, 1.0) }
    }
}

impl KdeConfig {
    /// Default configuration integrating over `[1/L, 1]`.
    pub fn for_classes(num_classes: usize) -> Self {
        KdeConfig { range: (1.0 / num_classes.max(1) as f64, 1.0), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.range;
        if self.grid_points < 64 || !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(CalError::InvalidConfig(format!(
                "kde needs grid_points >= 64 and 0 <= lo < hi <= 1 (got {}, [{lo}, {hi}])",
                self.grid_points
            )));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0) || !h.is_finite() {
                return Err(CalError::InvalidConfig(format!("bandwidth must be positive, got {h}")));
            }
        }
        Ok(())
    }

    /// Resolves the bandwidth against a set of confidences.
    pub fn resolve_bandwidth(&self, confidences: &[f64]) -> f64 {
        match self.bandwidth {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Silverman => silverman_bandwidth(confidences),
        }
    }

    pub(crate) fn grid(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let (lo, hi) = self.range;
        let g = self.grid_points;
        let step = (hi - lo) / (g - 1) as f64;
        (0..g).map(move |k| {
            let x = if k == g - 1 { hi } else { lo + step * k as f64 };
            let weight = if k == 0 || k == g - 1 { 0.5 * step } else { step };
            (x, weight)
        })
    }
}

pub fn silverman_bandwidth(confidences: &[f64]) -> f64 {
    let n = confidences.len();
    if n < 2 {
        return 1e-3;
    }
    let mean = confidences.iter().sum::<f64>() / n as f64;
    let var = confidences.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (1.06 * var.sqrt() * (n as f64).powf(-0.2)).max(1e-3)
}

/// Kernel sums at one grid point, restricted to samples whose kernel reaches it.
struct GridTerms {
    density: f64,
    signed: f64,
}

fn grid_terms(x: f64, sorted: &[(f64, bool)], kernel: Kernel, h: f64) -> GridTerms {
    let reach = kernel.reach() * h;
    let start = sorted.partition_point(|s| s.0 < x - reach);
    let mut density = 0.0;
    let mut signed = 0.0;
    for &(w, correct) in &sorted[start..] {
        if w > x + reach {
            break;
        }
        let k = kernel.value((x - w) / h);
        density += k;
        signed += (x - if correct { 1.0 } else { 0.0 }) * k;
    }
    GridTerms { density, signed }
}

/// `∫ |w − ÃCC(w)| P̃(w) dw` over the configured range.
pub fn ece_kde(samples: &[ScoredSample], cfg: &KdeConfig) -> Result<f64> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(CalError::InsufficientData(format!(
            "kde calibration error needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let confidences: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
    let h = cfg.resolve_bandwidth(&confidences);
    Ok(ece_kde_with_bandwidth(samples, cfg, h))
}

/// As [`ece_kde`] with an already resolved bandwidth.
pub fn ece_kde_with_bandwidth(samples: &[ScoredSample], cfg: &KdeConfig, h: f64) -> f64 {
    let sorted = sorted_pairs(samples);
    let scale = 1.0 / (samples.len() as f64 * h);
    cfg.grid()
        .map(|(x, weight)| {
            let t = grid_terms(x, &sorted, cfg.kernel, h);
            if t.density < DENSITY_UNDERFLOW {
                0.0
            } else {
                weight * (t.signed * scale).abs()
            }
        })
        .sum()
}

/// Kernel calibration error and its gradient with respect to every sample's
/// confidence, for a fixed bandwidth.
pub fn ece_kde_and_confidence_gradient(samples: &[ScoredSample], cfg: &KdeConfig, h: f64) -> (f64, Vec<f64>) {
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| samples[a].confidence.total_cmp(&samples[b].confidence));
    let sorted: Vec<(f64, bool)> = order.iter().map(|&i| (samples[i].confidence, samples[i].correct)).collect();

    let scale = 1.0 / (n as f64 * h);
    let reach = cfg.kernel.reach() * h;
    let mut loss = 0.0;
    let mut grad_sorted = vec![0.0; n];
    for (x, weight) in cfg.grid() {
        let t = grid_terms(x, &sorted, cfg.kernel, h);
        if t.density < DENSITY_UNDERFLOW {
            continue;
        }
        let value = t.signed * scale;
        loss += weight * value.abs();
        let sign = if value > 0.0 {
            1.0
        } else if value < 0.0 {
            -1.0
        } else {
            0.0
        };
        if sign == 0.0 {
            continue;
        }
        let start = sorted.partition_point(|s| s.0 < x - reach);
        for (j, &(w, correct)) in sorted.iter().enumerate().skip(start) {
            if w > x + reach {
                break;
            }
            let c = if correct { 1.0 } else { 0.0 };
            // d/dw of (x − c)·K((x − w)/h)
            let dk = -(x - c) * cfg.kernel.derivative((x - w) / h) / h;
            grad_sorted[j] += weight * sign * scale * dk;
        }
    }
    let mut grad = vec![0.0; n];
    for (j, &i) in order.iter().enumerate() {
        grad[i] = grad_sorted[j];
    }
    (loss, grad)
}

fn sorted_pairs(samples: &[ScoredSample]) -> Vec<(f64, bool)> {
    let mut v: Vec<(f64, bool)> = samples.iter().map(|s| (s.confidence, s.correct)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    v
}

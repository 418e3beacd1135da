use serde::{Deserialize, Serialize};

use crate::datamodel::{softmax, ProbVector};
use crate::error::{CalError, Result};
use crate::metrics::PROB_FLOOR;

pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);
const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll: f64,
}

fn log_probs(probs: &[ProbVector]) -> Vec<Vec<f64>> {
    probs
        .iter()
        .map(|p| p.as_slice().iter().map(|x| x.max(PROB_FLOOR).ln()).collect())
        .collect()
}

fn tempered_nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) / t;
            let lse = z.iter().map(|x| (x / t - max).exp()).sum::<f64>().ln() + max;
            lse - z[y] / t
        })
        .sum();
    total / logits.len() as f64
}

/// NLL of `softmax(log p / t)` against the labels.
pub fn temperature_nll(probs: &[ProbVector], labels: &[usize], t: f64) -> f64 {
    tempered_nll(&log_probs(probs), labels, t)
}

/// Single-parameter temperature fit by golden-section search on the NLL.
pub fn fit_temperature(probs: &[ProbVector], labels: &[usize]) -> Result<TemperatureFit> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(CalError::Shape(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    if let Some(i) = probs.iter().zip(labels).position(|(p, &y)| y >= p.len()) {
        return Err(CalError::OutOfBounds { index: labels[i], len: probs[i].len() });
    }
    let logits = log_probs(probs);
    let f = |t: f64| tempered_nll(&logits, labels, t);

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = TEMPERATURE_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let temperature = 0.5 * (a + b);
    Ok(TemperatureFit { temperature, nll: f(temperature) })
}

/// Rescales every prediction by `softmax(log p / t)`.
pub fn apply_temperature(probs: &[ProbVector], t: f64) -> Result<Vec<ProbVector>> {
    log_probs(probs)
        .iter()
        .map(|z| softmax(&z.iter().map(|x| x / t).collect::<Vec<_>>()))
        .collect()
}

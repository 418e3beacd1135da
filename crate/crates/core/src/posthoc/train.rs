//! Direct minimization of histogram or kernel calibration error over the
//! per-bin attenuation weights, by mini-batch gradient descent.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CalError, Result};
use crate::metrics::{ece_kde_and_confidence_gradient, ece_kde_with_bandwidth, BinningScheme, KdeConfig, ScoredSample};

use super::mapping::{AttenuationWeights, MappingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    HistEce,
    KdeEce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    CentralDifference(f64),
}

/// How much of the calibration set one epoch consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochMode {
    /// Every shuffled mini-batch of the calibration set, one step each.
    FullPass,
    /// A single shuffled mini-batch per epoch.
    SingleBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub gradient: GradientMode,
    pub epoch_mode: EpochMode,
    pub seed: u64,
    pub kde: KdeConfig,
}

impl TrainConfig {
    pub fn hist(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            batch_size: 1000,
            learning_rate: 0.02,
            loss: LossKind::HistEce,
            gradient: GradientMode::Analytic,
            epoch_mode: EpochMode::FullPass,
            seed: 0,
            kde: KdeConfig::default(),
        }
    }

    pub fn kde(epochs: usize, kde: KdeConfig) -> Self {
        TrainConfig { loss: LossKind::KdeEce, kde, ..Self::hist(epochs) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !(self.learning_rate > 0.0) {
            return Err(CalError::InvalidConfig(format!(
                "training needs batch_size >= 2 and learning_rate > 0 (got {}, {})",
                self.batch_size, self.learning_rate
            )));
        }
        if let GradientMode::CentralDifference(step) = self.gradient {
            if !(step > 0.0) {
                return Err(CalError::InvalidConfig(format!("finite-difference step must be positive, got {step}")));
            }
        }
        if self.loss == LossKind::KdeEce {
            self.kde.validate()?;
        }
        Ok(())
    }
}

/// One calibration sample: winning score, geometric variance, correctness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub v: f64,
    pub hv: f64,
    pub correct: bool,
}

/// A calibration sample with its (ψ-independent) bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinnedSample {
    pub v: f64,
    pub hv: f64,
    pub bin: usize,
    pub correct: bool,
}

pub fn bin_samples(data: &[CalibrationSample], bins: &BinningScheme) -> Vec<BinnedSample> {
    data.iter()
        .map(|s| BinnedSample { v: s.v, hv: s.hv, bin: bins.index_of(s.v), correct: s.correct })
        .collect()
}

fn hist_loss_and_gradient(psi: &[f64], batch: &[BinnedSample], mapping: &MappingConfig) -> (f64, Vec<f64>) {
    let b = psi.len();
    let mut hits = vec![0.0; b];
    let mut conf = vec![0.0; b];
    let mut dconf = vec![0.0; b];
    for s in batch {
        let (w, dw) = mapping.map_with_derivative(s.v, s.hv, psi[s.bin]);
        hits[s.bin] += if s.correct { 1.0 } else { 0.0 };
        conf[s.bin] += w;
        dconf[s.bin] += dw;
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; b];
    for k in 0..b {
        // (|P_k|/n)·|acc_k − conf_k| = |hits_k − Σw|/n
        let gap = conf[k] - hits[k];
        loss += gap.abs() / n;
        let sign = if gap > 0.0 {
            1.0
        } else if gap < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad[k] = sign * dconf[k] / n;
    }
    (loss, grad)
}

fn kde_loss_and_gradient(
    psi: &[f64],
    batch: &[BinnedSample],
    mapping: &MappingConfig,
    kde: &KdeConfig,
) -> (f64, Vec<f64>) {
    let raw: Vec<f64> = batch.iter().map(|s| s.v).collect();
    let h = kde.resolve_bandwidth(&raw);
    let mut mapped = Vec::with_capacity(batch.len());
    let mut dw = Vec::with_capacity(batch.len());
    for s in batch {
        let (w, d) = mapping.map_with_derivative(s.v, s.hv, psi[s.bin]);
        mapped.push(ScoredSample { confidence: w, correct: s.correct });
        dw.push(d);
    }
    let (loss, dconf) = ece_kde_and_confidence_gradient(&mapped, kde, h);
    let mut grad = vec![0.0; psi.len()];
    for ((s, g), d) in batch.iter().zip(&dconf).zip(&dw) {
        grad[s.bin] += g * d;
    }
    (loss, grad)
}

/// Loss value only.
pub fn batch_loss(psi: &[f64], batch: &[BinnedSample], mapping: &MappingConfig, cfg: &TrainConfig) -> f64 {
    match cfg.loss {
        LossKind::HistEce => hist_loss_and_gradient(psi, batch, mapping).0,
        LossKind::KdeEce => {
            let raw: Vec<f64> = batch.iter().map(|s| s.v).collect();
            let h = cfg.kde.resolve_bandwidth(&raw);
            let mapped: Vec<ScoredSample> = batch
                .iter()
                .map(|s| ScoredSample {
                    confidence: mapping.map_with_derivative(s.v, s.hv, psi[s.bin]).0,
                    correct: s.correct,
                })
                .collect();
            ece_kde_with_bandwidth(&mapped, &cfg.kde, h)
        }
    }
}

/// Calibration loss of a batch and its gradient with respect to `psi`.
///
/// Bin membership comes from the raw winning score and the kernel bandwidth
/// is resolved from the raw scores, so neither moves with `psi`. At `|·|`
/// kinks the subgradient 0 is used.
pub fn loss_and_gradient(
    psi: &[f64],
    batch: &[BinnedSample],
    mapping: &MappingConfig,
    cfg: &TrainConfig,
) -> (f64, Vec<f64>) {
    match cfg.gradient {
        GradientMode::Analytic => match cfg.loss {
            LossKind::HistEce => hist_loss_and_gradient(psi, batch, mapping),
            LossKind::KdeEce => kde_loss_and_gradient(psi, batch, mapping, &cfg.kde),
        },
        GradientMode::CentralDifference(step) => {
            let loss = batch_loss(psi, batch, mapping, cfg);
            let mut probe = psi.to_vec();
            let grad = (0..psi.len())
                .map(|k| {
                    probe[k] = psi[k] + step;
                    let up = batch_loss(&probe, batch, mapping, cfg);
                    probe[k] = psi[k] - step;
                    let down = batch_loss(&probe, batch, mapping, cfg);
                    probe[k] = psi[k];
                    (up - down) / (2.0 * step)
                })
                .collect();
            (loss, grad)
        }
    }
}

/// Full-calibration-set loss of a set of weights.
pub fn calibration_loss(
    psi: &[f64],
    data: &[CalibrationSample],
    bins: &BinningScheme,
    mapping: &MappingConfig,
    cfg: &TrainConfig,
) -> f64 {
    batch_loss(psi, &bin_samples(data, bins), mapping, cfg)
}

/// Fits the attenuation weights.
///
/// Each epoch reshuffles the calibration set with a seeded generator and
/// takes plain gradient steps `ψ ← ψ − lr·∇`. The full-set loss is recorded
/// at the start and after every epoch, and the weights with the lowest such
/// loss are returned.
pub fn fit(
    data: &[CalibrationSample],
    bins: &BinningScheme,
    mapping: MappingConfig,
    cfg: &TrainConfig,
    init: Option<&[f64]>,
) -> Result<AttenuationWeights> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(CalError::InsufficientData(format!(
            "fitting needs at least 2 calibration samples, got {}",
            data.len()
        )));
    }
    let b = bins.num_bins();
    let mut psi = match init {
        Some(p) if p.len() != b => {
            return Err(CalError::Shape(format!("initial weights have length {}, bins {}", p.len(), b)))
        }
        Some(p) => p.to_vec(),
        None => vec![0.0; b],
    };
    let binned = bin_samples(data, bins);
    let full_loss = |psi: &[f64], epoch: usize| -> Result<f64> {
        let l = batch_loss(psi, &binned, &mapping, cfg);
        if l.is_nan() {
            return Err(CalError::NanLoss { epoch, psi: psi.to_vec() });
        }
        Ok(l)
    };

    let mut best_loss = full_loss(&psi, 0)?;
    let mut best = psi.clone();
    let mut trace = vec![best_loss];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..binned.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size.min(binned.len()));

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let steps = match cfg.epoch_mode {
            EpochMode::FullPass => order.len().div_ceil(cfg.batch_size),
            EpochMode::SingleBatch => 1,
        };
        for chunk in order.chunks(cfg.batch_size).take(steps) {
            if chunk.len() < 2 {
                continue;
            }
            batch.clear();
            batch.extend(chunk.iter().map(|&i| binned[i]));
            let (loss, grad) = loss_and_gradient(&psi, &batch, &mapping, cfg);
            if loss.is_nan() || grad.iter().any(|g| g.is_nan()) {
                return Err(CalError::NanLoss { epoch, psi });
            }
            for (p, g) in psi.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
        let l = full_loss(&psi, epoch)?;
        trace.push(l);
        if l < best_loss {
            best_loss = l;
            best.copy_from_slice(&psi);
        }
    }

    let mut weights = AttenuationWeights::new(best, bins.clone(), mapping)?;
    weights.loss_trace = trace;
    Ok(weights)
}

/// Histogram-loss fit from zero followed by a kernel-loss fit warm-started at
/// the histogram solution. The loss traces are concatenated.
pub fn fit_compositional(
    data: &[CalibrationSample],
    bins: &BinningScheme,
    mapping: MappingConfig,
    hist_cfg: &TrainConfig,
    kde_cfg: &TrainConfig,
) -> Result<AttenuationWeights> {
    if hist_cfg.loss != LossKind::HistEce || kde_cfg.loss != LossKind::KdeEce {
        return Err(CalError::InvalidConfig(
            "compositional training expects a histogram stage followed by a kernel stage".into(),
        ));
    }
    let hist = fit(data, bins, mapping, hist_cfg, None)?;
    if kde_cfg.epochs == 0 {
        return Ok(hist);
    }
    let mut kde = fit(data, bins, mapping, kde_cfg, Some(&hist.psi))?;
    let mut trace = hist.loss_trace;
    trace.append(&mut kde.loss_trace);
    kde.loss_trace = trace;
    Ok(kde)
}

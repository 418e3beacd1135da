//! Post-hoc confidence mapping: per-bin attenuation of the winning score,
//! optionally regularized by the truth-discovery geometric variance, fitted
//! by directly minimizing calibration error. Temperature scaling is kept as
//! a baseline.

mod evaluate;
mod mapping;
mod temperature;
mod train;

pub use evaluate::{
    evaluate_pipeline, mapped_scores, metric_set, with_confidence, EvalConfig, EvalSample, MetricReport, MetricSet,
};
pub use mapping::{apply_mapping, Alpha2Mode, AttenuationWeights, MappingConfig};
pub use temperature::{apply_temperature, fit_temperature, temperature_nll, TemperatureFit, TEMPERATURE_RANGE};
pub use train::{
    batch_loss, bin_samples, calibration_loss, fit, fit_compositional, loss_and_gradient, BinnedSample,
    CalibrationSample, EpochMode, GradientMode, LossKind, TrainConfig,
};

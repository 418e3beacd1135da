//! Calibration of ensemble classifiers by truth discovery.
//!
//! The crate aggregates the probability vectors of an ensemble into a truth
//! vector with per-source reliabilities, measures calibration, and fits a
//! per-bin attenuation of the winning score by minimizing calibration error.

pub mod datamodel;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod posthoc;
pub mod synth;
pub mod truth;

pub use datamodel::{argmax_tiebreak, ensemble_mean, ensemble_means, softmax, EnsembleTensor, PredictionOutcome, ProbVector};
pub use error::{CalError, Result};
pub use truth::{discover_all, discover_batch, discover_truth, TruthConfig, TruthResult, Variant};

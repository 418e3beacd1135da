use serde::{Deserialize, Serialize};

use crate::error::{CalError, Result};
use crate::metrics::BinningScheme;

/// How the HV term is weighted in the mapping `w = v − α1·ψ_κ − α2·HV`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alpha2Mode {
    Zero,
    Constant(f64),
    /// `α2 = ψ_κ`, so the bin weight scales both terms.
    PerBinPsi,
}

impl Alpha2Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Alpha2Mode::Zero => "zero",
            Alpha2Mode::Constant(_) => "constant",
            Alpha2Mode::PerBinPsi => "per_bin_psi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingConfig {
    pub alpha1: f64,
    pub alpha2_mode: Alpha2Mode,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig { alpha1: 1.0, alpha2_mode: Alpha2Mode::PerBinPsi }
    }
}

impl MappingConfig {
    /// Mapped confidence and its derivative with respect to the bin weight.
    ///
    /// The clamp to `[0, 1]` passes the derivative through on the closed
    /// interval and zeroes it strictly outside.
    pub fn map_with_derivative(&self, v: f64, hv: f64, psi: f64) -> (f64, f64) {
        let (alpha2, dalpha2) = match self.alpha2_mode {
            Alpha2Mode::Zero => (0.0, 0.0),
            Alpha2Mode::Constant(a) => (a, 0.0),
            Alpha2Mode::PerBinPsi => (psi, 1.0),
        };
        let raw = v - self.alpha1 * psi - alpha2 * hv;
        let d = -self.alpha1 - dalpha2 * hv;
        if raw < 0.0 {
            (0.0, 0.0)
        } else if raw > 1.0 {
            (1.0, 0.0)
        } else {
            (raw, d)
        }
    }
}

/// Learned per-bin attenuation of the winning score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttenuationWeights {
    pub psi: Vec<f64>,
    pub bins: BinningScheme,
    pub mapping: MappingConfig,
    pub loss_trace: Vec<f64>,
}

impl AttenuationWeights {
    pub fn new(psi: Vec<f64>, bins: BinningScheme, mapping: MappingConfig) -> Result<Self> {
        if psi.len() != bins.num_bins() {
            return Err(CalError::Shape(format!(
                "{} attenuation weights for {} bins",
                psi.len(),
                bins.num_bins()
            )));
        }
        if let Some(i) = psi.iter().position(|x| !x.is_finite()) {
            return Err(CalError::NonFinite { index: i, value: psi[i] });
        }
        Ok(AttenuationWeights { psi, bins, mapping, loss_trace: Vec::new() })
    }

    /// The identity mapping over `bins`.
    pub fn identity(bins: BinningScheme, mapping: MappingConfig) -> Self {
        let psi = vec![0.0; bins.num_bins()];
        AttenuationWeights { psi, bins, mapping, loss_trace: Vec::new() }
    }
}

/// Maps a winning score `v` with geometric variance `hv` to a confidence.
pub fn apply_mapping(v: f64, hv: f64, weights: &AttenuationWeights) -> f64 {
    let k = weights.bins.index_of(v);
    weights.mapping.map_with_derivative(v, hv, weights.psi[k]).0
}

use serde::{Deserialize, Serialize};

use crate::error::{CalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinPolicy {
    EqualMass,
    EqualWidth,
}

/// Frozen bin endpoints `μ_1 < … < μ_B < ν_B` over confidence space.
///
/// Bin `b` holds `μ_b ≤ w < ν_b`; the last bin is right-closed so that a
/// confidence of exactly `ν_B` is included. Values outside the covered range
/// are assigned to the nearest end bin and flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningScheme {
    endpoints: Vec<f64>,
    policy: BinPolicy,
    requested: usize,
}

/// Where a confidence landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinAssignment {
    pub index: usize,
    pub out_of_range: bool,
}

impl BinningScheme {
    /// Rebuilds a scheme from stored endpoints.
    pub fn from_endpoints(endpoints: Vec<f64>, policy: BinPolicy) -> Result<Self> {
        if endpoints.len() < 2 {
            return Err(CalError::InvalidConfig("a binning scheme needs at least two endpoints".into()));
        }
        if endpoints.iter().any(|x| !x.is_finite()) || endpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CalError::InvalidConfig(format!(
                "bin endpoints must be finite and strictly ascending: {endpoints:?}"
            )));
        }
        let requested = endpoints.len() - 1;
        Ok(BinningScheme { endpoints, policy, requested })
    }

    pub fn endpoints(&self) -> &[f64] {
        &self.endpoints
    }

    pub fn policy(&self) -> BinPolicy {
        self.policy
    }

    pub fn num_bins(&self) -> usize {
        self.endpoints.len() - 1
    }

    /// Bin count asked for at construction; larger than [`Self::num_bins`]
    /// when tied confidences collapsed some quantiles.
    pub fn requested_bins(&self) -> usize {
        self.requested
    }

    pub fn bounds(&self, b: usize) -> (f64, f64) {
        (self.endpoints[b], self.endpoints[b + 1])
    }

    pub fn assign(&self, w: f64) -> BinAssignment {
        let b = self.num_bins();
        let lo = self.endpoints[0];
        let hi = self.endpoints[b];
        if w < lo {
            return BinAssignment { index: 0, out_of_range: true };
        }
        if w >= hi {
            return BinAssignment { index: b - 1, out_of_range: w > hi };
        }
        // first endpoint strictly greater than w, minus one
        let idx = self.endpoints.partition_point(|&e| e <= w) - 1;
        BinAssignment { index: idx.min(b - 1), out_of_range: false }
    }

    pub fn index_of(&self, w: f64) -> usize {
        self.assign(w).index
    }
}

/// Builds bins over `confidences`.
///
/// Equal-mass endpoints sit at the `k·N/B`-th order statistics, so each bin
/// starts at a data point; duplicate quantiles are dropped. Equal-width bins
/// partition `[min, 1]` uniformly. The top endpoint is always 1.
pub fn build_bins(confidences: &[f64], num_bins: usize, policy: BinPolicy) -> Result<BinningScheme> {
    let n = confidences.len();
    if num_bins == 0 || n < num_bins {
        return Err(CalError::InsufficientData(format!(
            "{n} confidences cannot fill {num_bins} bins"
        )));
    }
    if let Some(i) = confidences.iter().position(|x| !x.is_finite()) {
        return Err(CalError::NonFinite { index: i, value: confidences[i] });
    }
    let mut sorted = confidences.to_vec();
    sorted.sort_by(f64::total_cmp);
    let top = sorted[n - 1].max(1.0);
    let mut lo = sorted[0];
    if lo >= top {
        lo = 0.0;
    }

    let mut endpoints = vec![lo];
    match policy {
        BinPolicy::EqualMass => {
            for k in 1..num_bins {
                let e = sorted[k * n / num_bins];
                if e > *endpoints.last().unwrap() && e < top {
                    endpoints.push(e);
                }
            }
        }
        BinPolicy::EqualWidth => {
            let width = (top - lo) / num_bins as f64;
            for k in 1..num_bins {
                endpoints.push(lo + width * k as f64);
            }
        }
    }
    endpoints.push(top);
    Ok(BinningScheme { endpoints, policy, requested: num_bins })
}

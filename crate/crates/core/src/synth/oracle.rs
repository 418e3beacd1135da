//! Brute-force reference implementations used to check the fast paths.

use crate::datamodel::ProbVector;
use crate::metrics::{BinningScheme, ScoredSample};

const DISPLACEMENT: f64 = 1e-13;
const MAX_CYCLES: usize = 1_000_000;

fn project_hyperplane(x: &mut [f64]) {
    let shift = (x.iter().sum::<f64>() - 1.0) / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= shift);
}

fn project_orthant(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

fn project_halfspace(x: &mut [f64], c: usize, l: usize) {
    if x[l] > x[c] {
        let m = 0.5 * (x[l] + x[c]);
        x[l] = m;
        x[c] = m;
    }
}

/// Euclidean projection of `z` onto the closed set of simplex points whose
/// class `c` is (weakly) maximal, by Dykstra's alternating projections over
/// the sum-to-one plane, the non-negative orthant and each `z_c ≥ z_l`.
pub fn oracle_projection(z: &ProbVector, c: usize) -> ProbVector {
    let n = z.len();
    let others: Vec<usize> = (0..n).filter(|&l| l != c).collect();
    let sets = 2 + others.len();
    let mut x = z.as_slice().to_vec();
    let mut corrections = vec![vec![0.0; n]; sets];
    for _ in 0..MAX_CYCLES {
        let start = x.clone();
        for (k, corr) in corrections.iter_mut().enumerate() {
            let before: Vec<f64> = x.iter().zip(corr.iter()).map(|(a, b)| a + b).collect();
            let mut y = before.clone();
            match k {
                0 => project_hyperplane(&mut y),
                1 => project_orthant(&mut y),
                _ => project_halfspace(&mut y, c, others[k - 2]),
            }
            for j in 0..n {
                corr[j] = before[j] - y[j];
            }
            x = y;
        }
        let moved: f64 = x.iter().zip(&start).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if moved < DISPLACEMENT {
            break;
        }
    }
    project_hyperplane(&mut x);
    ProbVector::from_trusted(x)
}

/// Histogram calibration error computed bin by bin with a full scan of the
/// samples for each bin.
pub fn oracle_ece(samples: &[ScoredSample], bins: &BinningScheme) -> f64 {
    let e = bins.endpoints();
    let nb = e.len() - 1;
    let total = samples.len() as f64;
    let mut err = 0.0;
    for b in 0..nb {
        let mut count = 0usize;
        let mut hits = 0usize;
        let mut conf = 0.0;
        for s in samples {
            let w = s.confidence;
            let inside = if b == 0 && w < e[0] {
                true
            } else if b == nb - 1 && w >= e[nb - 1] {
                true
            } else {
                e[b] <= w && w < e[b + 1]
            };
            if inside {
                count += 1;
                conf += w;
                if s.correct {
                    hits += 1;
                }
            }
        }
        if count > 0 {
            let c = count as f64;
            err += c / total * (hits as f64 / c - conf / c).abs();
        }
    }
    err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::BinPolicy;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn close(a: &ProbVector, b: &[f64]) -> bool {
        a.as_slice().iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
    }

    #[test]
    fn hand_projections() {
        assert!(close(&oracle_projection(&pv(&[0.5, 0.3, 0.2]), 0), &[0.5, 0.3, 0.2]));
        assert!(close(&oracle_projection(&pv(&[0.5, 0.3, 0.2]), 1), &[0.4, 0.4, 0.2]));
        assert!(close(&oracle_projection(&pv(&[0.5, 0.3, 0.2]), 2), &[0.35, 0.3, 0.35]));
    }

    #[test]
    fn ece_of_empty_error_and_single_sample() {
        let bins = BinningScheme::from_endpoints(vec![0.0, 0.5, 1.0], BinPolicy::EqualWidth).unwrap();
        let perfect = [ScoredSample::new(1.0, true), ScoredSample::new(0.0, false)];
        assert_eq!(oracle_ece(&perfect, &bins), 0.0);
        assert!((oracle_ece(&[ScoredSample::new(0.7, false)], &bins) - 0.7).abs() < 1e-15);
    }
}

//! Monte Carlo summary statistics.
//!
//! All reductions run in a canonical order (pairwise over the path-indexed
//! sample vector), so estimates are bit-identical for any worker count.

use serde::{Deserialize, Serialize};

/// Point estimate with its standard error.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimatorReport {
    /// What was estimated (estimator-specific label).
    pub label: String,
    /// Point estimate.
    pub value: f64,
    /// Standard error of the mean (sample std / sqrt(n)).
    pub std_error: f64,
    /// Number of Monte Carlo samples.
    pub samples: usize,
    /// Free-form notes (e.g. "exceeds-budget" for overflowing exponentials).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl EstimatorReport {
    /// Builds a report from per-sample values in canonical order.
    pub fn from_samples(label: impl Into<String>, samples: &[f64]) -> EstimatorReport {
        let (value, std_error) = mean_se(samples);
        EstimatorReport {
            label: label.into(),
            value,
            std_error,
            samples: samples.len(),
            notes: Vec::new(),
        }
    }

    /// `|self.value - other| <= k * combined standard error` test helper.
    pub fn within_se_of(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.std_error
    }
}

/// Pairwise (cascade) summation: deterministic and accurate to O(log n) ulps.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        let mut s = 0.0;
        for v in values {
            s += v;
        }
        s
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, f64::INFINITY);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Least-squares slope of `ln y` against `ln x`.
///
/// Used to read off scaling exponents from ladder tables; requires positive
/// inputs and at least two points.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two ladder points");
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = pairwise_sum(&lx) / n;
    let my = pairwise_sum(&ly) / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in lx.iter().zip(ly.iter()) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mean_se_of_constant_samples_is_exact() {
        let vals = vec![2.5; 100];
        let (m, se) = mean_se(&vals);
        assert_eq!(m, 2.5);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_inputs() {
        let vals: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.1).sin()).collect();
        let naive: f64 = vals.iter().sum();
        assert_relative_eq!(pairwise_sum(&vals), naive, max_relative = 1e-12);
    }

    #[test]
    fn pairwise_sum_is_split_invariantly_deterministic() {
        let vals: Vec<f64> = (0..4097).map(|i| ((i * 2654435761_usize) % 1000) as f64 * 1e-3).collect();
        assert_eq!(pairwise_sum(&vals).to_bits(), pairwise_sum(&vals).to_bits());
    }

    #[test]
    fn loglog_slope_recovers_power_law() {
        let xs = [0.5, 0.25, 0.125, 0.0625];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(0.75)).collect();
        assert_relative_eq!(loglog_slope(&xs, &ys), 0.75, epsilon = 1e-12);
    }
}

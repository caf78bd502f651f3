//! Order-fixed reductions used for Monte-Carlo estimates.

use serde::{Deserialize, Serialize};

/// Pairwise summation in a fixed recursion order, so sums are bit-stable
/// regardless of how the inputs were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    pairwise_sum(values) / values.len() as f64
}

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl McEstimate {
    pub fn exact(value: f64) -> Self {
        Self { mean: value, std_error: 0.0 }
    }

    /// Sample mean and `s / sqrt(n)` with the unbiased sample deviation.
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let m = mean(values);
        if n < 2 {
            return Self { mean: m, std_error: 0.0 };
        }
        let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
        let var = pairwise_sum(&sq) / (n - 1) as f64;
        Self { mean: m, std_error: (var / n as f64).sqrt() }
    }

    /// Whether `value` lies within `k` standard errors (plus a floor).
    pub fn covers(&self, value: f64, k: f64, floor: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error + floor
    }
}

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

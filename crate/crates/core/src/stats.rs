//! Deterministic reductions: pairwise summation, log-sum-exp and batch-means
//! standard errors. Every estimator in the crate funnels through these so
//! that the reduction order never depends on the worker count.

use serde::{Deserialize, Serialize};

/// Pairwise (cascade) summation with a fixed split order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// `log Σ exp(v_i)`; returns `-inf` for an empty slice or all `-inf` inputs.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let shifted: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    max + pairwise_sum(&shifted).ln()
}

/// Mean with a batch-means standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate {
            mean: value,
            stderr: 0.0,
            samples: 0,
        }
    }

    /// `|mean - target| <= k * stderr`, treating a zero stderr as an exact match requirement
    /// up to `1e-12` relative slack.
    pub fn within(&self, target: f64, k: f64) -> bool {
        let slack = k * self.stderr + 1e-12 * target.abs().max(1.0);
        (self.mean - target).abs() <= slack
    }
}

/// Batch-means estimate using `⌊√n⌋` contiguous batches.
///
/// Batches are contiguous in observation order, which is trajectory order,
/// so the result is reproducible for a fixed ensemble.
pub fn batch_estimate(values: &[f64]) -> Estimate {
    let n = values.len();
    if n == 0 {
        return Estimate {
            mean: f64::NAN,
            stderr: f64::NAN,
            samples: 0,
        };
    }
    let m = mean(values);
    if n < 4 {
        return Estimate {
            mean: m,
            stderr: f64::NAN,
            samples: n,
        };
    }
    let batches = ((n as f64).sqrt().floor() as usize).max(2);
    let mut means = Vec::with_capacity(batches);
    for b in 0..batches {
        let lo = b * n / batches;
        let hi = (b + 1) * n / batches;
        means.push(mean(&values[lo..hi]));
    }
    let mb = mean(&means);
    let dev: Vec<f64> = means.iter().map(|v| (v - mb) * (v - mb)).collect();
    let var = pairwise_sum(&dev) / (batches as f64 - 1.0);
    Estimate {
        mean: m,
        stderr: (var / batches as f64).sqrt(),
        samples: n,
    }
}

/// Batch-means estimate of `mean(exp(log_values))`, evaluated with a max
/// shift so that the result is representable whenever its logarithm is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEstimate {
    pub log_mean: f64,
    /// Standard error relative to the mean.
    pub rel_stderr: f64,
    pub samples: usize,
}

impl LogEstimate {
    pub fn mean(&self) -> f64 {
        self.log_mean.exp()
    }

    pub fn stderr(&self) -> f64 {
        self.rel_stderr * self.mean()
    }
}

pub fn batch_log_estimate(log_values: &[f64]) -> LogEstimate {
    let shift = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return LogEstimate {
            log_mean: shift,
            rel_stderr: f64::NAN,
            samples: log_values.len(),
        };
    }
    let scaled: Vec<f64> = log_values.iter().map(|l| (l - shift).exp()).collect();
    let est = batch_estimate(&scaled);
    LogEstimate {
        log_mean: shift + est.mean.ln(),
        rel_stderr: est.stderr / est.mean,
        samples: est.samples,
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let sxy: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let sxx: Vec<f64> = x.iter().map(|a| (a - mx) * (a - mx)).collect();
    pairwise_sum(&sxy) / pairwise_sum(&sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 500500.0);
    }

    #[test]
    fn log_sum_exp_handles_large_arguments() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn batch_estimate_of_constant_has_zero_stderr() {
        let v = vec![3.0; 100];
        let e = batch_estimate(&v);
        assert_eq!(e.mean, 3.0);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn log_estimate_agrees_with_direct_mean() {
        let logs: Vec<f64> = (0..400).map(|i| (i as f64 * 0.01).sin()).collect();
        let direct: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
        let a = batch_estimate(&direct);
        let b = batch_log_estimate(&logs);
        assert!((a.mean - b.mean()).abs() < 1e-12);
        assert!((a.stderr - b.stderr()).abs() < 1e-12);
    }

    #[test]
    fn slope_of_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        assert!((fit_slope(&x, &y) - 2.0).abs() < 1e-14);
    }
}

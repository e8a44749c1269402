//! Binomial frequencies with Wilson score intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `count` successes in `trials`, at normal quantile `z`.
pub fn wilson_interval(count: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = count as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Normal quantile making `m` simultaneous two-sided intervals hold jointly at 95%.
pub fn bonferroni_z(m: usize) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(1.0 - 0.025 / m.max(1) as f64)
}

/// An empirical frequency with its 95% Wilson interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frequency {
    pub count: u64,
    pub trials: u64,
    pub freq: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl Frequency {
    pub fn new(count: u64, trials: u64) -> Self {
        Self::with_z(count, trials, Z95)
    }

    pub fn with_z(count: u64, trials: u64, z: f64) -> Self {
        let (ci_lo, ci_hi) = wilson_interval(count, trials, z);
        let freq = if trials == 0 { 0.0 } else { count as f64 / trials as f64 };
        Self { count, trials, freq, ci_lo, ci_hi }
    }

    /// The interval contains `p`.
    pub fn covers(&self, p: f64) -> bool {
        self.ci_lo <= p && p <= self.ci_hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_reference_values() {
        // 10 of 100 at z = 1.96: (0.05523, 0.17437)
        let (lo, hi) = wilson_interval(10, 100, 1.96);
        assert!((lo - 0.055_229).abs() < 1e-5 && (hi - 0.174_366).abs() < 1e-5, "{lo} {hi}");
        let (lo, hi) = wilson_interval(0, 1000, Z95);
        assert!(lo < 1e-15);
        assert!((hi - 0.003_827).abs() < 1e-5, "{hi}");
        let (lo, hi) = wilson_interval(50, 50, Z95);
        assert!(hi == 1.0 && lo < 1.0);
    }

    #[test]
    fn bonferroni_quantiles() {
        assert!((bonferroni_z(1) - Z95).abs() < 1e-6);
        assert!((bonferroni_z(10) - 2.807_033_768).abs() < 1e-6);
    }
}

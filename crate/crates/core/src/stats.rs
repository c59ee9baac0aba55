//! Small Monte Carlo statistics helpers.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::special::normal_quantile;

/// A mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl MeanEstimate {
    /// `|a − b|` in units of the combined standard error.
    pub fn z_distance(&self, other: &MeanEstimate) -> f64 {
        let se = (self.std_error.powi(2) + other.std_error.powi(2)).sqrt();
        if se == 0.0 {
            if self.mean == other.mean {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - other.mean).abs() / se
        }
    }
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Mean with the i.i.d. standard error.
    pub fn estimate(&self) -> MeanEstimate {
        MeanEstimate { mean: self.mean, std_error: (self.variance() / self.n.max(1) as f64).sqrt(), n: self.n }
    }
}

pub fn mean_estimate(xs: &[f64]) -> MeanEstimate {
    let mut w = Welford::default();
    xs.iter().for_each(|&x| w.push(x));
    w.estimate()
}

/// Mean of a correlated series, standard error from `batches` batch means.
pub fn batch_means(xs: &[f64], batches: usize) -> MeanEstimate {
    let batches = batches.max(2).min(xs.len().max(2));
    let len = xs.len() / batches;
    if len == 0 {
        return mean_estimate(xs);
    }
    let means: Vec<f64> = (0..batches).map(|b| xs[b * len..(b + 1) * len].iter().sum::<f64>() / len as f64).collect();
    let mut e = mean_estimate(&means);
    e.mean = xs.iter().sum::<f64>() / xs.len() as f64;
    e.n = xs.len();
    e
}

/// Kolmogorov–Smirnov distance between the empirical law of `samples` and `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s: Vec<f64> = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in s.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Upper `p`-quantile of χ²(k) by the Wilson–Hilferty approximation.
pub fn chi_squared_critical(k: usize, p: f64) -> f64 {
    let k = k as f64;
    let z = -normal_quantile(p);
    let a = 2.0 / (9.0 * k);
    k * (1.0 - a + z * a.sqrt()).powi(3)
}

/// Pearson statistic of `observed` counts against `expected` counts.
pub fn chi_squared(observed: &[f64], expected: &[f64]) -> f64 {
    observed.iter().zip(expected).filter(|(_, e)| **e > 0.0).map(|(o, e)| (o - e).powi(2) / e).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, 2.5, -3.0, 7.25];
        let m = xs.iter().sum::<f64>() / 5.0;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
        let e = mean_estimate(&xs);
        assert!((e.mean - m).abs() < 1e-14);
        assert!((e.std_error - (v / 5.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn chi_squared_critical_values() {
        // tabulated 99% points: χ²(10) = 23.209, χ²(30) = 50.892
        assert!((chi_squared_critical(10, 0.01) - 23.209).abs() < 0.1);
        assert!((chi_squared_critical(30, 0.01) - 50.892).abs() < 0.1);
    }

    #[test]
    fn ks_of_uniform_grid() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_statistic(&xs, |x| x) - 0.005).abs() < 1e-12);
    }
}

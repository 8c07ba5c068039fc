//! Synthetic training distributions.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use rand::Rng as _;

/// Isotropic Gaussian mixture; `std = 0` gives point masses.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub std: f64,
}

impl DatasetSpec {
    pub fn new(means: Vec<Vec<f64>>, weights: Vec<f64>, std: f64) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(Error::Config("dataset needs matching non-empty means and weights".into()));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::Config("dataset means must share a positive dimension".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) || !(std >= 0.0) {
            return Err(Error::Config("dataset weights must be positive and std >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        Ok(Self {
            means,
            weights: weights.iter().map(|w| w / total).collect(),
            std,
        })
    }

    /// `N(0, I)` in `d` dimensions.
    pub fn standard_normal(d: usize) -> Self {
        Self::new(vec![vec![0.0; d]], vec![1.0], 1.0).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z = rng::normal_vec(rng, self.dim());
        self.means[k].iter().zip(&z).map(|(m, e)| m + self.std * e).collect()
    }

    pub fn sample_n(&self, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Normalized density (requires `std > 0`).
    pub fn density(&self, x: &[f64]) -> f64 {
        let s2 = self.std * self.std;
        let norm = (2.0 * std::f64::consts::PI * s2).powf(self.dim() as f64 / 2.0);
        self.means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                let q: f64 = x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
                w * (-q / (2.0 * s2)).exp() / norm
            })
            .sum()
    }
}

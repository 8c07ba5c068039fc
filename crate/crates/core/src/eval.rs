//! Sample-based metrics, grid oracles and the metrics CSV.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::EpsModel;
use crate::rewards::RewardSpec;
use crate::schedule::{sample_terminals, NoiseSchedule};

pub const DIVERSITY_BATCH: usize = 64;

pub fn mean_reward(samples: &[Vec<f64>], reward: &RewardSpec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("mean_reward needs samples"));
    }
    Ok(samples.iter().map(|x| reward.reward(x)).sum::<f64>() / samples.len() as f64)
}

fn batch_variance(batch: &[Vec<f64>]) -> f64 {
    let n = batch.len() as f64;
    let d = batch[0].len();
    let mut total = 0.0;
    for k in 0..d {
        let mean = batch.iter().map(|x| x[k]).sum::<f64>() / n;
        total += batch.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    }
    total / d as f64
}

/// Mean per-coordinate sample variance over consecutive batches of 64
/// (a trailing partial batch is dropped unless it is the only one).
pub fn diversity(samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Empty("diversity needs at least two samples"));
    }
    if samples.len() < DIVERSITY_BATCH {
        return Ok(batch_variance(samples));
    }
    let batches: Vec<f64> = samples.chunks_exact(DIVERSITY_BATCH).map(batch_variance).collect();
    Ok(batches.iter().sum::<f64>() / batches.len() as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_pair_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += dist(x, y);
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|` (V-statistic).
pub fn prior_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("prior_distance needs two non-empty sets"));
    }
    let cross = 0.5 * (mean_pair_dist(a, b) + mean_pair_dist(b, a));
    Ok(2.0 * cross - mean_pair_dist(a, a) - mean_pair_dist(b, b))
}

/// Normalized histogram over the box `[lo, hi]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOracle {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub dim: usize,
    /// Row-major cell masses, the last coordinate varying fastest.
    pub probs: Vec<f64>,
}

impl GridOracle {
    /// Default grid: 200 bins in 1D, 50 x 50 in 2D, over `[-4, 4]^d`.
    pub fn default_for(dim: usize) -> Result<Self> {
        match dim {
            1 => Ok(Self::empty(1, 200, -4.0, 4.0)),
            2 => Ok(Self::empty(2, 50, -4.0, 4.0)),
            _ => Err(Error::Config(format!("grid oracles support d <= 2, got {dim}"))),
        }
    }

    pub fn empty(dim: usize, bins: usize, lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            bins,
            dim,
            probs: vec![0.0; bins.pow(dim as u32)],
        }
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn cell_of(&self, x: &[f64]) -> Option<usize> {
        let mut idx = 0;
        for &v in x {
            if !(v >= self.lo && v < self.hi) {
                return None;
            }
            let k = (((v - self.lo) / self.width()) as usize).min(self.bins - 1);
            idx = idx * self.bins + k;
        }
        Some(idx)
    }

    pub fn center(&self, cell: usize) -> Vec<f64> {
        let mut rem = cell;
        let mut x = vec![0.0; self.dim];
        for k in (0..self.dim).rev() {
            x[k] = self.lo + (rem % self.bins) as f64 * self.width() + 0.5 * self.width();
            rem /= self.bins;
        }
        x
    }

    /// Histogram of `samples`; returns the masses and the out-of-box mass.
    pub fn histogram(&self, samples: &[Vec<f64>]) -> (Vec<f64>, f64) {
        let mut counts = vec![0.0; self.probs.len()];
        let mut out = 0.0;
        for x in samples {
            match self.cell_of(x) {
                Some(i) => counts[i] += 1.0,
                None => out += 1.0,
            }
        }
        let n = samples.len().max(1) as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        (counts, out / n)
    }

    /// Midpoint-rule discretization of an unnormalized log-density.
    pub fn from_log_density(mut self, log_density: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let logs: Vec<f64> = (0..self.probs.len()).map(|i| log_density(&self.center(i))).collect();
        self.probs = normalize_logs(&logs)?;
        Ok(self)
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

fn normalize_logs(logs: &[f64]) -> Result<Vec<f64>> {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            what: "oracle table has no finite mass".into(),
        });
    }
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.iter().map(|v| v / z).collect())
}

/// Pretrained terminal histogram reweighted by `R^beta` at cell centers.
pub fn build_target_oracle(
    pretrained: &dyn EpsModel,
    reward: &RewardSpec,
    beta: f64,
    schedule: &NoiseSchedule,
    grid: GridOracle,
    n_dense: usize,
    seed: u64,
) -> Result<GridOracle> {
    let samples = sample_terminals(pretrained, schedule, grid.dim, n_dense, seed)?;
    let (hist, _) = grid.histogram(&samples);
    let logs: Vec<f64> = hist
        .iter()
        .enumerate()
        .map(|(i, &p)| if p > 0.0 { p.ln() + beta * reward.log_reward(&grid.center(i)) } else { f64::NEG_INFINITY })
        .collect();
    let mut oracle = grid;
    oracle.probs = normalize_logs(&logs)?;
    Ok(oracle)
}

/// Total variation between the sample histogram and the oracle; samples
/// outside the box count as mismatched mass.
pub fn target_tv(samples: &[Vec<f64>], oracle: &GridOracle) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("target_tv needs samples"));
    }
    let (hist, out) = oracle.histogram(samples);
    Ok(tv(&hist, &oracle.probs) + 0.5 * out)
}

/// `1/2 sum |p - q|`.
pub fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub diversity: f64,
    pub prior_distance: f64,
    /// NaN when no oracle was supplied.
    pub target_tv: f64,
    pub terminal_g_norm: f64,
    pub loss_fwd: f64,
    pub loss_rev: f64,
    pub loss_terminal: f64,
    pub loss_reg: f64,
}

pub const CSV_HEADER: &str =
    "step,mean_reward,diversity,prior_distance,target_tv,terminal_g_norm,loss_fwd,loss_rev,loss_terminal,loss_reg";

impl MetricsRecord {
    /// Metric columns after `step`, in CSV order.
    pub fn values(&self) -> [f64; 9] {
        [
            self.mean_reward,
            self.diversity,
            self.prior_distance,
            self.target_tv,
            self.terminal_g_norm,
            self.loss_fwd,
            self.loss_rev,
            self.loss_terminal,
            self.loss_reg,
        ]
    }

    /// Inverse of [`MetricsRecord::values`].
    pub fn from_values(step: usize, v: [f64; 9]) -> Self {
        Self {
            step,
            mean_reward: v[0],
            diversity: v[1],
            prior_distance: v[2],
            target_tv: v[3],
            terminal_g_norm: v[4],
            loss_fwd: v[5],
            loss_rev: v[6],
            loss_terminal: v[7],
            loss_reg: v[8],
        }
    }
}

/// CSV text; floats use the shortest round-trip representation.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        write!(s, "{}", r.step).unwrap();
        for v in r.values() {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn export_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(records)).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config("metrics CSV header mismatch".into()));
    }
    let bad = |l: &str| Error::Config(format!("malformed metrics row: {l}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 10 {
                return Err(bad(l));
            }
            let mut v = [0.0; 9];
            for (i, x) in v.iter_mut().enumerate() {
                *x = f[i + 1].parse::<f64>().map_err(|_| bad(l))?;
            }
            Ok(MetricsRecord::from_values(f[0].parse().map_err(|_| bad(l))?, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::rng::rng_from;

    fn normal_samples(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from(seed, &[]);
        let ds = DatasetSpec::new(vec![vec![shift; d]], vec![1.0], 1.0).unwrap();
        ds.sample_n(n, &mut rng)
    }

    #[test]
    fn reward_and_diversity_basics() {
        let r = RewardSpec::constant(2);
        let xs = normal_samples(100, 2, 0.0, 1);
        assert!((mean_reward(&xs, &r).unwrap() - 1.0).abs() < 1e-15);
        assert!(mean_reward(&[], &r).is_err());
        assert_eq!(diversity(&vec![vec![0.5, 0.5]; 128]).unwrap(), 0.0);
        let shifted: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] + 3.0, x[1] - 7.0]).collect();
        assert!((diversity(&xs).unwrap() - diversity(&shifted).unwrap()).abs() < 1e-12);
        let big = normal_samples(64 * 400, 2, 0.0, 2);
        assert!((diversity(&big).unwrap() - 1.0).abs() < 0.02);
    }

    #[test]
    fn energy_distance_matches_closed_form() {
        let a = normal_samples(1500, 1, 0.0, 3);
        let b = normal_samples(1500, 1, 1.0, 4);
        assert_eq!(prior_distance(&a, &a).unwrap(), 0.0);
        assert!((prior_distance(&a, &b).unwrap() - prior_distance(&b, &a).unwrap()).abs() < 1e-12);
        // X - Y ~ N(1, 2): E|X - Y| = 2 phi(1/sqrt 2) sqrt 2 + (1 - 2 Phi(-1/sqrt 2)).
        let s = 2f64.sqrt();
        let phi = (-0.25f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cdf = 0.5 * (1.0 - erf(0.5));
        let e_xy = 2.0 * s * phi + (1.0 - 2.0 * cdf);
        let exact = 2.0 * e_xy - 2.0 * 2.0 / std::f64::consts::PI.sqrt();
        let reps: Vec<f64> = (0..16)
            .map(|k| {
                let a = normal_samples(1000, 1, 0.0, 10 + k);
                let b = normal_samples(1000, 1, 1.0, 30 + k);
                prior_distance(&a, &b).unwrap()
            })
            .collect();
        let n = reps.len() as f64;
        let got = reps.iter().sum::<f64>() / n;
        let se = (reps.iter().map(|r| (r - got).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!((got - exact).abs() < 4.0 * se, "{got} vs {exact} (se {se})");
    }

    // Abramowitz-Stegun 7.1.26, accurate to 1.5e-7.
    fn erf(x: f64) -> f64 {
        let t = 1.0 / (1.0 + 0.3275911 * x.abs());
        let y = 1.0
            - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t + 0.254829592)
                * t
                * (-x * x).exp();
        y.copysign(x)
    }

    #[test]
    fn grid_oracle_normalization_and_tv() {
        let g = GridOracle::default_for(2).unwrap().from_log_density(|x| -0.5 * (x[0] * x[0] + x[1] * x[1])).unwrap();
        assert!((g.total() - 1.0).abs() < 1e-9);
        // 10^5 samples spread over ~2000 occupied cells leave a sampling
        // floor near 0.04 in 2D; 10^6 samples are needed for 0.02.
        let xs = normal_samples(1_000_000, 2, 0.0, 5);
        let v = target_tv(&xs, &g).unwrap();
        assert!(v <= 0.02, "{v}");
        let g1 = GridOracle::default_for(1).unwrap().from_log_density(|x| -0.5 * x[0] * x[0]).unwrap();
        let v1 = target_tv(&normal_samples(100_000, 1, 0.0, 6), &g1).unwrap();
        assert!(v1 <= 0.02, "{v1}");
        assert!(tv(&g.probs, &g.probs) == 0.0);
        let far = vec![vec![3.9, 3.9]; 10];
        let narrow = GridOracle::default_for(2).unwrap().from_log_density(|x| -50.0 * (x[0] * x[0] + x[1] * x[1])).unwrap();
        assert!(target_tv(&far, &narrow).unwrap() > 0.999);
        assert!(target_tv(&[vec![9.0, 0.0]], &narrow).unwrap() == 1.0);
    }

    #[test]
    fn cells_and_centers_agree() {
        let g = GridOracle::default_for(2).unwrap();
        for cell in [0, 7, 51, 2499] {
            assert_eq!(g.cell_of(&g.center(cell)), Some(cell));
        }
    }

    #[test]
    fn csv_round_trip() {
        assert_eq!(metrics_csv(&[]), format!("{CSV_HEADER}\n"));
        let recs = vec![
            MetricsRecord {
                step: 3,
                mean_reward: 0.1 + 0.2,
                diversity: 1e-300,
                target_tv: f64::NAN,
                ..Default::default()
            },
            MetricsRecord {
                step: 9,
                loss_reg: -2.5e17,
                ..Default::default()
            },
        ];
        let back = parse_metrics_csv(&metrics_csv(&recs)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].mean_reward, 0.1 + 0.2);
        assert!(back[0].target_tv.is_nan());
        assert_eq!(back[1], recs[1]);
        assert_eq!(CSV_HEADER.split(',').count(), 10);
    }
}

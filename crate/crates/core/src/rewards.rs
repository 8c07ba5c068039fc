//! Positive analytic rewards with exact derivatives.
//!
//! Mixture-type rewards (`Gmm`, `Ring`) have unit peak height per component
//! and a positive `floor` added before the logarithm, which keeps `log R`
//! bounded below on the evaluation box. `QuadraticWell` and `Tilt` are
//! defined directly in log space and are positive without a floor.
//!
//! `scale` multiplies `R`; it shifts `log R` by a constant and leaves every
//! gradient untouched.

use crate::autodiff::ScalarField;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const DEFAULT_FLOOR: f64 = 1e-4;
pub const DEFAULT_SMOOTH_VAR: f64 = 2e-3;
pub const DEFAULT_SMOOTH_SAMPLES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum RewardKind {
    /// `sum_k w_k exp(-|x - m_k|^2 / (2 s_k^2))`.
    Gmm {
        means: Vec<Vec<f64>>,
        weights: Vec<f64>,
        stds: Vec<f64>,
    },
    /// `exp(-(|x| - radius)^2 / (2 width^2))`.
    Ring { radius: f64, width: f64 },
    /// `log R = -a |x - center|^2`.
    QuadraticWell { center: Vec<f64>, a: f64 },
    /// `log R = slope . x`.
    Tilt { slope: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub floor: f64,
    pub scale: f64,
}

impl RewardSpec {
    pub fn new(kind: RewardKind) -> Result<Self> {
        let spec = Self {
            kind,
            floor: DEFAULT_FLOOR,
            scale: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gmm(means: Vec<Vec<f64>>, weights: Vec<f64>, std: f64) -> Result<Self> {
        let stds = vec![std; means.len()];
        Self::new(RewardKind::Gmm { means, weights, stds })
    }

    pub fn ring(radius: f64, width: f64) -> Result<Self> {
        Self::new(RewardKind::Ring { radius, width })
    }

    pub fn quadratic_well(center: Vec<f64>, a: f64) -> Result<Self> {
        Self::new(RewardKind::QuadraticWell { center, a })
    }

    pub fn tilt(slope: Vec<f64>) -> Result<Self> {
        Self::new(RewardKind::Tilt { slope })
    }

    /// Constant reward (a zero tilt).
    pub fn constant(d: usize) -> Self {
        Self::tilt(vec![0.0; d]).expect("zero tilt is valid")
    }

    pub fn with_floor(mut self, floor: f64) -> Result<Self> {
        self.floor = floor;
        self.validate()?;
        Ok(self)
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        self.scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("reward scale must be positive, got {}", self.scale));
        }
        match &self.kind {
            RewardKind::Gmm { means, weights, stds } => {
                if means.is_empty() || means.len() != weights.len() || means.len() != stds.len() {
                    return bad("gmm reward needs matching non-empty means/weights/stds".into());
                }
                let d = means[0].len();
                if d == 0 || means.iter().any(|m| m.len() != d) {
                    return bad("gmm means must share a positive dimension".into());
                }
                if weights.iter().any(|w| !(*w > 0.0)) || stds.iter().any(|s| !(*s > 0.0)) {
                    return bad("gmm weights and stds must be positive".into());
                }
                if !(self.floor > 0.0) {
                    return bad(format!("reward floor must be positive, got {}", self.floor));
                }
            }
            RewardKind::Ring { radius, width } => {
                if !(*radius >= 0.0 && *width > 0.0) {
                    return bad("ring reward needs radius >= 0 and width > 0".into());
                }
                if !(self.floor > 0.0) {
                    return bad(format!("reward floor must be positive, got {}", self.floor));
                }
            }
            RewardKind::QuadraticWell { center, a } => {
                if center.is_empty() || !(*a >= 0.0) {
                    return bad("quadratic well needs a centre and a >= 0".into());
                }
            }
            RewardKind::Tilt { slope } => {
                if slope.is_empty() {
                    return bad("tilt reward needs a slope vector".into());
                }
            }
        }
        Ok(())
    }

    /// Input dimension, when the kind fixes one.
    pub fn dim(&self) -> Option<usize> {
        match &self.kind {
            RewardKind::Gmm { means, .. } => Some(means[0].len()),
            RewardKind::Ring { .. } => None,
            RewardKind::QuadraticWell { center, .. } => Some(center.len()),
            RewardKind::Tilt { slope } => Some(slope.len()),
        }
    }

    pub fn reward(&self, x: &[f64]) -> f64 {
        self.log_reward(x).exp()
    }

    pub fn log_reward(&self, x: &[f64]) -> f64 {
        let base = match &self.kind {
            RewardKind::Gmm { .. } | RewardKind::Ring { .. } => {
                let (v, _) = self.mixture_value_grad(x);
                (v + self.floor).ln()
            }
            RewardKind::QuadraticWell { center, a } => -a * dist_sq(x, center),
            RewardKind::Tilt { slope } => dot(slope, x),
        };
        base + self.scale.ln()
    }

    pub fn log_reward_grad(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            RewardKind::Gmm { .. } | RewardKind::Ring { .. } => {
                let (v, g) = self.mixture_value_grad(x);
                g.into_iter().map(|gi| gi / (v + self.floor)).collect()
            }
            RewardKind::QuadraticWell { center, a } => {
                x.iter().zip(center).map(|(xi, m)| -2.0 * a * (xi - m)).collect()
            }
            RewardKind::Tilt { slope } => slope.clone(),
        }
    }

    /// `H v` for the Hessian `H` of `log R` at `x`.
    pub fn log_reward_hvp(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        match &self.kind {
            RewardKind::Gmm { means, weights, stds } => {
                let d = x.len();
                let mut total = 0.0;
                let mut grad = vec![0.0; d];
                let mut hv = vec![0.0; d];
                for ((m, w), s) in means.iter().zip(weights).zip(stds) {
                    let s2 = s * s;
                    let c = w * (-dist_sq(x, m) / (2.0 * s2)).exp();
                    let diff: Vec<f64> = x.iter().zip(m).map(|(a, b)| a - b).collect();
                    let dv = dot(&diff, v);
                    total += c;
                    for i in 0..d {
                        grad[i] -= c * diff[i] / s2;
                        hv[i] += c * (diff[i] * dv / (s2 * s2) - v[i] / s2);
                    }
                }
                let b = total + self.floor;
                let gv = dot(&grad, v);
                (0..d).map(|i| hv[i] / b - grad[i] * gv / (b * b)).collect()
            }
            RewardKind::Ring { radius, width } => {
                let rho = norm(x).max(1e-12);
                let w2 = width * width;
                let f = (-(rho - radius).powi(2) / (2.0 * w2)).exp();
                let u = (rho - radius) / w2;
                let f1 = -u * f;
                let f2 = (u * u - 1.0 / w2) * f;
                let b = f + self.floor;
                let xhat: Vec<f64> = x.iter().map(|xi| xi / rho).collect();
                let xv = dot(&xhat, v);
                // H_base v = f2 x̂(x̂·v) + f1/rho (v - x̂(x̂·v)); grad_base = f1 x̂.
                (0..x.len())
                    .map(|i| {
                        let hb = f2 * xhat[i] * xv + f1 / rho * (v[i] - xhat[i] * xv);
                        hb / b - f1 * xhat[i] * f1 * xv / (b * b)
                    })
                    .collect()
            }
            RewardKind::QuadraticWell { a, .. } => v.iter().map(|vi| -2.0 * a * vi).collect(),
            RewardKind::Tilt { .. } => vec![0.0; v.len()],
        }
    }

    fn mixture_value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match &self.kind {
            RewardKind::Gmm { means, weights, stds } => {
                let mut v = 0.0;
                let mut g = vec![0.0; x.len()];
                for ((m, w), s) in means.iter().zip(weights).zip(stds) {
                    let s2 = s * s;
                    let c = w * (-dist_sq(x, m) / (2.0 * s2)).exp();
                    v += c;
                    for ((gi, xi), mi) in g.iter_mut().zip(x).zip(m) {
                        *gi -= c * (xi - mi) / s2;
                    }
                }
                (v, g)
            }
            RewardKind::Ring { radius, width } => {
                let rho = norm(x);
                let w2 = width * width;
                let f = (-(rho - radius).powi(2) / (2.0 * w2)).exp();
                let g = if rho > 1e-12 {
                    let k = -f * (rho - radius) / (w2 * rho);
                    x.iter().map(|xi| k * xi).collect()
                } else {
                    vec![0.0; x.len()]
                };
                (f, g)
            }
            _ => unreachable!("not a mixture reward"),
        }
    }

    /// Monte Carlo estimate of `E_{e ~ N(0, cI)} grad log R(x + e)`.
    pub fn smoothed_log_reward_grad(&self, x: &[f64], c: f64, n: usize, rng: &mut Rng) -> Vec<f64> {
        assert!(c >= 0.0 && n >= 1, "smoothing needs c >= 0 and n >= 1");
        if c == 0.0 {
            return self.log_reward_grad(x);
        }
        let sd = c.sqrt();
        let mut acc = vec![0.0; x.len()];
        for _ in 0..n {
            let z = rng::normal_vec(rng, x.len());
            let xp: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + sd * b).collect();
            for (a, g) in acc.iter_mut().zip(self.log_reward_grad(&xp)) {
                *a += g;
            }
        }
        acc.iter().map(|a| a / n as f64).collect()
    }
}

impl ScalarField for RewardSpec {
    fn value(&self, x: &[f64]) -> f64 {
        self.log_reward(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.log_reward_grad(x)
    }

    fn hvp(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        self.log_reward_hvp(x, v)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn two_mode() -> RewardSpec {
        RewardSpec::gmm(vec![vec![-1.5, 0.5], vec![1.5, -0.5]], vec![1.0, 1.0], 0.6).unwrap()
    }

    fn zoo() -> Vec<RewardSpec> {
        vec![
            two_mode(),
            RewardSpec::gmm(vec![vec![-2.0], vec![1.0]], vec![0.3, 1.0], 0.5).unwrap(),
            RewardSpec::ring(1.0, 0.3).unwrap(),
            RewardSpec::quadratic_well(vec![0.5, -1.0], 0.7).unwrap(),
            RewardSpec::tilt(vec![0.4, -0.2]).unwrap(),
        ]
    }

    #[test]
    fn single_mode_peak() {
        let r = RewardSpec::gmm(vec![vec![0.0]], vec![1.0], 1.0).unwrap();
        assert!((r.log_reward(&[0.0]) - (1.0 + DEFAULT_FLOOR).ln()).abs() < 1e-15);
    }

    #[test]
    fn symmetric_mixture() {
        let r = two_mode();
        let mut rng = rng::rng_from(3, &[]);
        for _ in 0..100 {
            let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            assert!((r.log_reward(&x) - r.log_reward(&[-x[0], -x[1]])).abs() < 1e-13);
        }
        let g = r.log_reward_grad(&[0.0, 0.0]);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn ring_is_maximal_on_its_radius() {
        let r = RewardSpec::ring(1.0, 0.3).unwrap();
        let dir = [0.6, 0.8];
        let on = r.log_reward(&dir);
        for k in 0..=400 {
            let rho = k as f64 * 0.01;
            assert!(r.log_reward(&[rho * dir[0], rho * dir[1]]) <= on + 1e-15);
        }
    }

    #[test]
    fn quadratic_well_gradient_formula() {
        let r = RewardSpec::quadratic_well(vec![0.5, -1.0], 0.7).unwrap();
        let g = r.log_reward_grad(&[1.0, 1.0]);
        assert_eq!(g, vec![-2.0 * 0.7 * 0.5, -2.0 * 0.7 * 2.0]);
    }

    #[test]
    fn gradients_and_hvps_match_finite_differences() {
        let mut rng = rng::rng_from(7, &[]);
        for r in zoo() {
            let d = r.dim().unwrap_or(2);
            for _ in 0..50 {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g = r.log_reward_grad(&x);
                let hv = r.log_reward_hvp(&x, &v);
                let h = 1e-5;
                for i in 0..d {
                    let mut p = x.clone();
                    let mut m = x.clone();
                    p[i] += h;
                    m[i] -= h;
                    let fd = (r.log_reward(&p) - r.log_reward(&m)) / (2.0 * h);
                    assert!((g[i] - fd).abs() <= 1e-6 * fd.abs().max(1e-2), "{:?}: {} vs {fd}", r.kind, g[i]);
                }
                let mut p = x.clone();
                let mut m = x.clone();
                for i in 0..d {
                    p[i] += h * v[i];
                    m[i] -= h * v[i];
                }
                let gp = r.log_reward_grad(&p);
                let gm = r.log_reward_grad(&m);
                for j in 0..d {
                    let fd = (gp[j] - gm[j]) / (2.0 * h);
                    assert!((hv[j] - fd).abs() <= 1e-5 * fd.abs().max(1e-2), "{:?}: {} vs {fd}", r.kind, hv[j]);
                }
            }
        }
    }

    #[test]
    fn positive_on_evaluation_grid() {
        for r in zoo() {
            let d = r.dim().unwrap_or(2);
            for i in 0..101 {
                for j in 0..101 {
                    let x = [-4.0 + 0.08 * i as f64, -4.0 + 0.08 * j as f64];
                    let v = r.reward(&x[..d]);
                    assert!(v > 0.0 && r.log_reward(&x[..d]).is_finite());
                }
            }
        }
    }

    #[test]
    fn scale_shifts_log_reward_only() {
        for r in zoo() {
            let s = r.clone().with_scale(37.5).unwrap();
            let x = vec![0.3; r.dim().unwrap_or(2)];
            assert!((s.log_reward(&x) - r.log_reward(&x) - 37.5_f64.ln()).abs() < 1e-12);
            assert_eq!(s.log_reward_grad(&x), r.log_reward_grad(&x));
        }
    }

    #[test]
    fn zero_smoothing_is_exact() {
        let r = two_mode();
        let mut rng = rng::rng_from(1, &[]);
        let x = [0.3, -0.4];
        assert_eq!(r.smoothed_log_reward_grad(&x, 0.0, 3, &mut rng), r.log_reward_grad(&x));
    }

    #[test]
    fn smoothed_gradient_matches_quadrature() {
        // Independent oracle: tensor trapezoid rule for the Gaussian
        // convolution of the exact gradient.
        let r = two_mode();
        let x = [0.4, 0.1];
        let c: f64 = 0.05;
        let sd = c.sqrt();
        let n_q = 401;
        let half = 8.0 * sd;
        let step = 2.0 * half / (n_q - 1) as f64;
        let mut num = [0.0; 2];
        let mut den = 0.0;
        for i in 0..n_q {
            for j in 0..n_q {
                let e = [-half + i as f64 * step, -half + j as f64 * step];
                let w = (-(e[0] * e[0] + e[1] * e[1]) / (2.0 * c)).exp();
                let g = r.log_reward_grad(&[x[0] + e[0], x[1] + e[1]]);
                num[0] += w * g[0];
                num[1] += w * g[1];
                den += w;
            }
        }
        let exact = [num[0] / den, num[1] / den];

        let n = 100_000;
        let mut rng = rng::rng_from(99, &[]);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let g = r.smoothed_log_reward_grad(&x, c, 1, &mut rng);
            for k in 0..2 {
                sum[k] += g[k];
                sq[k] += g[k] * g[k];
            }
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let se = ((sq[k] / n as f64 - mean * mean) / n as f64).sqrt();
            assert!((mean - exact[k]).abs() <= 3.0 * se, "{mean} vs {} (se {se})", exact[k]);
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(RewardSpec::gmm(vec![], vec![], 1.0).is_err());
        assert!(RewardSpec::gmm(vec![vec![0.0]], vec![1.0], 0.0).is_err());
        assert!(two_mode().with_floor(0.0).is_err());
        assert!(two_mode().with_scale(-1.0).is_err());
        assert!(RewardSpec::ring(1.0, 0.0).is_err());
    }
}

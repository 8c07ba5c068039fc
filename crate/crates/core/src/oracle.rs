//! Closed-form linear-Gaussian diffusion systems.
//!
//! When data is `N(m, I)` every noisy marginal is `N(sqrt(ab_s) m, I)` and
//! the DDPM posterior `q(x_{s-1} | x_s)` has mean `m_{s-1} + r (x_s - m_s)`
//! and variance exactly `1 - r^2`, the fixed policy variance. The exact noise
//! predictor is affine in `x`, so the optimal policy, its flows and their
//! scores are all available in closed form.
//!
//! Two constructions are provided:
//!
//! * [`GaussianSystem::quadratic_well`]: target `N(m*, I)` reached from
//!   scratch with the reward `log R = -|x - m*|^2 / (2 beta)`. The log-flow
//!   is `log F_t(x) = -|x - sqrt(ab_s) m*|^2 / 2` with no constant.
//! * [`GaussianSystem::residual_tilt`]: pretrained `N(m0, I)` finetuned with
//!   the tilt reward `log R = a . x`. The product target is
//!   `N(m0 + beta a, I)`; the residual log-flow is affine,
//!   `k_t . x + c_t` with `k_t = beta a sqrt(ab_s)`.
//!
//! A Gaussian-shaped reward cannot be used for the residual system: with
//! fixed policy variances the product of two Gaussians of different widths
//! is not reachable, while the tilt keeps the unit variance.

use crate::autodiff::{Tape, Var};
use crate::nets::{EpsModel, EpsOnTape};
use crate::rewards::RewardSpec;
use crate::schedule::NoiseSchedule;

/// `eps_t(x) = slope_t x + offset_t`, an analytic noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineEps {
    pub slope: Vec<f64>,
    pub offset: Vec<Vec<f64>>,
}

impl AffineEps {
    /// Exact noise predictor for data `N(mean, I)` under `schedule`.
    pub fn for_gaussian_data(schedule: &NoiseSchedule, mean: &[f64]) -> Self {
        let steps = schedule.steps();
        let mut slope = Vec::with_capacity(steps + 1);
        let mut offset = Vec::with_capacity(steps + 1);
        for t in 0..=steps {
            let ab = schedule.alpha_bar_at(t);
            let k = (1.0 - ab).sqrt();
            slope.push(k);
            offset.push(mean.iter().map(|m| -k * ab.sqrt() * m).collect());
        }
        Self { slope, offset }
    }

    pub fn with_offset_shift(mut self, shift: f64) -> Self {
        for (t, o) in self.offset.iter_mut().enumerate() {
            if self.slope[t] > 0.0 {
                o.iter_mut().for_each(|v| *v += shift);
            }
        }
        self
    }
}

impl EpsModel for AffineEps {
    fn dim(&self) -> usize {
        self.offset[0].len()
    }

    fn eps(&self, x: &[f64], t: usize) -> Vec<f64> {
        x.iter().zip(&self.offset[t]).map(|(xi, o)| self.slope[t] * xi + o).collect()
    }

    fn eps_vjp(&self, _x: &[f64], t: usize, cotangent: &[f64]) -> Vec<f64> {
        cotangent.iter().map(|c| self.slope[t] * c).collect()
    }

    fn bind_eps<'t>(&'t self, tape: &'t Tape) -> Box<dyn EpsOnTape<'t> + 't> {
        Box::new(BoundAffine { eps: self, tape })
    }
}

struct BoundAffine<'t> {
    eps: &'t AffineEps,
    tape: &'t Tape,
}

impl<'t> EpsOnTape<'t> for BoundAffine<'t> {
    fn eps(&self, x: Var<'t>, t: usize) -> Var<'t> {
        x.scale(self.eps.slope[t]) + self.tape.var_from(&self.eps.offset[t])
    }

    fn params(&self) -> Vec<Var<'t>> {
        Vec::new()
    }
}

/// Exact noise predictor for isotropic Gaussian-mixture data: the noised
/// marginal at diffusion time `s` is a mixture of
/// `N(sqrt(ab) m_k, (ab s0^2 + 1 - ab) I)` and `eps = -sqrt(1 - ab) grad log p`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureEps {
    pub data: crate::data::DatasetSpec,
    pub alpha_bar: Vec<f64>,
}

impl MixtureEps {
    pub fn new(schedule: &NoiseSchedule, data: crate::data::DatasetSpec) -> Self {
        let steps = schedule.steps();
        Self {
            data,
            alpha_bar: (0..=steps).map(|t| schedule.alpha_bar_at(t)).collect(),
        }
    }

    /// `grad log p_t(x)` of the noised data marginal.
    pub fn marginal_score(&self, x: &[f64], t: usize) -> Vec<f64> {
        let ab = self.alpha_bar[t];
        let var = ab * self.data.std * self.data.std + 1.0 - ab;
        let logs: Vec<f64> = self
            .data
            .means
            .iter()
            .zip(&self.data.weights)
            .map(|(m, w)| w.ln() - x.iter().zip(m).map(|(a, b)| (a - ab.sqrt() * b).powi(2)).sum::<f64>() / (2.0 * var))
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = resp.iter().sum();
        let mut g = vec![0.0; x.len()];
        for (m, r) in self.data.means.iter().zip(&resp) {
            for (gi, (xi, mi)) in g.iter_mut().zip(x.iter().zip(m)) {
                *gi -= r / z * (xi - ab.sqrt() * mi) / var;
            }
        }
        g
    }
}

impl EpsModel for MixtureEps {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn eps(&self, x: &[f64], t: usize) -> Vec<f64> {
        let k = (1.0 - self.alpha_bar[t]).sqrt();
        self.marginal_score(x, t).iter().map(|g| -k * g).collect()
    }

    fn eps_vjp(&self, x: &[f64], t: usize, cotangent: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut up = x.to_vec();
                let mut dn = x.to_vec();
                up[i] += h;
                dn[i] -= h;
                let (a, b) = (self.eps(&up, t), self.eps(&dn, t));
                cotangent.iter().zip(a.iter().zip(&b)).map(|(c, (p, q))| c * (p - q) / (2.0 * h)).sum()
            })
            .collect()
    }

    fn bind_eps<'t>(&'t self, _tape: &'t Tape) -> Box<dyn EpsOnTape<'t> + 't> {
        panic!("the mixture oracle has no tape form")
    }
}

#[derive(Debug, Clone)]
pub struct GaussianSystem {
    pub schedule: NoiseSchedule,
    /// Pretrained data mean.
    pub m_pre: Vec<f64>,
    /// Finetuned (target) data mean.
    pub m_target: Vec<f64>,
    pub beta: f64,
    pub reward: RewardSpec,
}

impl GaussianSystem {
    /// Non-residual system: sample `N(centre, I)` from the reward alone.
    pub fn quadratic_well(schedule: NoiseSchedule, centre: Vec<f64>, beta: f64) -> Self {
        let reward = RewardSpec::quadratic_well(centre.clone(), 0.5 / beta).expect("valid well");
        Self {
            schedule,
            m_pre: vec![0.0; centre.len()],
            m_target: centre,
            beta,
            reward,
        }
    }

    /// Residual system: pretrained `N(m0, I)` tilted by `exp(slope . x)`.
    pub fn residual_tilt(schedule: NoiseSchedule, m0: Vec<f64>, slope: Vec<f64>, beta: f64) -> Self {
        let m_target = m0.iter().zip(&slope).map(|(m, a)| m + beta * a).collect();
        let reward = RewardSpec::tilt(slope).expect("valid tilt");
        Self {
            schedule,
            m_pre: m0,
            m_target,
            beta,
            reward,
        }
    }

    pub fn dim(&self) -> usize {
        self.m_target.len()
    }

    fn sqrt_ab(&self, t: usize) -> f64 {
        self.schedule.alpha_bar_at(t).sqrt()
    }

    pub fn pretrained_policy(&self) -> AffineEps {
        AffineEps::for_gaussian_data(&self.schedule, &self.m_pre)
    }

    pub fn target_policy(&self) -> AffineEps {
        AffineEps::for_gaussian_data(&self.schedule, &self.m_target)
    }

    /// Mean of the exact target policy at transition `t`.
    pub fn target_policy_mean(&self, x: &[f64], t: usize) -> Vec<f64> {
        let r = self.schedule.backward_ratio(t);
        let (prev, cur) = (self.sqrt_ab(t + 1), self.sqrt_ab(t));
        x.iter()
            .zip(&self.m_target)
            .map(|(xi, m)| prev * m + r * (xi - cur * m))
            .collect()
    }

    /// `log F_t(x)` of the target process.
    pub fn log_flow(&self, x: &[f64], t: usize) -> f64 {
        let c = self.sqrt_ab(t);
        -0.5 * x.iter().zip(&self.m_target).map(|(xi, m)| (xi - c * m).powi(2)).sum::<f64>()
    }

    pub fn flow_score(&self, x: &[f64], t: usize) -> Vec<f64> {
        let c = self.sqrt_ab(t);
        x.iter().zip(&self.m_target).map(|(xi, m)| -(xi - c * m)).collect()
    }

    /// `grad log F_t - grad log F#_t`, constant in `x`.
    pub fn residual_flow_score(&self, t: usize) -> Vec<f64> {
        let c = self.sqrt_ab(t);
        self.m_target.iter().zip(&self.m_pre).map(|(a, b)| c * (a - b)).collect()
    }

    /// Residual log-flow `k_t . x + c_t` normalized so that `c_T = 0`.
    pub fn residual_log_flow(&self, x: &[f64], t: usize) -> f64 {
        let steps = self.schedule.steps();
        let mut c = 0.0;
        for u in (t..steps).rev() {
            let k_next = self.residual_flow_score(u + 1);
            let r = self.schedule.backward_ratio(u);
            let sigma2 = self.schedule.sigma(u).powi(2);
            let (prev, cur) = (self.sqrt_ab(u + 1), self.sqrt_ab(u));
            let o: f64 = self
                .m_pre
                .iter()
                .zip(&k_next)
                .map(|(m, k)| k * (prev * m - r * cur * m))
                .sum();
            c += o + 0.5 * sigma2 * k_next.iter().map(|k| k * k).sum::<f64>();
        }
        let k = self.residual_flow_score(t);
        k.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + c
    }

    /// Target density `N(m_target, I)` at `x`.
    pub fn target_density(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let q: f64 = x.iter().zip(&self.m_target).map(|(a, b)| (a - b).powi(2)).sum();
        (-0.5 * q).exp() / (2.0 * std::f64::consts::PI).powf(d / 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{backward_policy_params, forward_policy_params, DiffusionState};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(8, 0.02, 0.4).unwrap()
    }

    fn log_normal(x: &[f64], mean: &[f64], std: f64) -> f64 {
        let d = x.len() as f64;
        let q: f64 = x.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
        -0.5 * q / (std * std) - d * (std * (2.0 * std::f64::consts::PI).sqrt()).ln()
    }

    #[test]
    fn affine_policy_is_the_posterior_mean() {
        let sys = GaussianSystem::residual_tilt(sched(), vec![0.3, -0.2], vec![0.5, 1.0], 1.5);
        let pol = sys.target_policy();
        let x = vec![0.7, -1.1];
        for t in 0..8 {
            let (mean, _) = forward_policy_params(&pol, &DiffusionState { x: x.clone(), t }, &sys.schedule).unwrap();
            for (a, b) in mean.iter().zip(sys.target_policy_mean(&x, t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn detailed_balance_holds_pointwise() {
        // log P_F(x'|x) + log F_t(x) = log P_B(x|x') + log F_{t+1}(x').
        let sys = GaussianSystem::quadratic_well(sched(), vec![1.0, -0.5], 2.0);
        let pol = sys.target_policy();
        for (x, xn) in [([0.1, 0.2], [0.5, -1.0]), ([-2.0, 1.0], [0.0, 0.3])] {
            for t in 0..8 {
                let (mf, sf) = forward_policy_params(&pol, &DiffusionState { x: x.to_vec(), t }, &sys.schedule).unwrap();
                let (mb, sb) = backward_policy_params(&xn, t, &sys.schedule);
                let lhs = log_normal(&xn, &mf, sf) + sys.log_flow(&x, t);
                let rhs = log_normal(&x, &mb, sb) + sys.log_flow(&xn, t + 1);
                assert!((lhs - rhs).abs() < 1e-10, "t={t}: {lhs} vs {rhs}");
            }
        }
        let x = [0.4, 2.0];
        assert!((sys.log_flow(&x, 8) - sys.beta * sys.reward.log_reward(&x)).abs() < 1e-12);
    }

    #[test]
    fn residual_detailed_balance_holds_pointwise() {
        let sys = GaussianSystem::residual_tilt(sched(), vec![0.3, -0.2], vec![0.5, 1.0], 1.5);
        let (pol, pre) = (sys.target_policy(), sys.pretrained_policy());
        for (x, xn) in [([0.1, 0.2], [0.5, -1.0]), ([-2.0, 1.0], [0.0, 0.3])] {
            for t in 0..8 {
                let st = DiffusionState { x: x.to_vec(), t };
                let (mf, sf) = forward_policy_params(&pol, &st, &sys.schedule).unwrap();
                let (mp, sp) = forward_policy_params(&pre, &st, &sys.schedule).unwrap();
                let lp = log_normal(&xn, &mf, sf) - log_normal(&xn, &mp, sp);
                let lf = sys.residual_log_flow(&xn, t + 1) - sys.residual_log_flow(&x, t);
                assert!((lp - lf).abs() < 1e-10, "t={t}: {lp} vs {lf}");
            }
        }
        let x = [0.4, 2.0];
        assert!((sys.residual_log_flow(&x, 8) - sys.beta * sys.reward.log_reward(&x)).abs() < 1e-12);
    }
}

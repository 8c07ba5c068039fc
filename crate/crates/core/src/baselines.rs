//! Comparison finetuning losses: clipped policy gradient, ReFL and DRaFT.
//!
//! Each loss returns its value and the exact gradient for the policy
//! parameters, in the flat layout of the policy network.

use std::sync::Arc;

use crate::autodiff::{ScalarField, Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{EpsModel, EpsOnTape};
use crate::rewards::RewardSpec;
use crate::rng::{self, Rng};
use crate::schedule::{policy_mean_on, predict_clean_on, NoiseSchedule, Trajectory};
use crate::objectives::log_normal_on;
use rand::Rng as _;

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub clip_ratio: f64,
    /// Stop window for ReFL as fractions of `T`.
    pub stop_window: (f64, f64),
    /// Number of differentiable trailing steps for DRaFT.
    pub k: usize,
    /// Multiplier on the DRaFT re-roll noise (1 is the sampler's own).
    pub draft_noise: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            clip_ratio: 0.2,
            stop_window: (0.7, 0.98),
            k: 1,
            draft_noise: 1.0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        let (lo, hi) = self.stop_window;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config("stop_window needs 0 < lo <= hi < 1".into()));
        }
        if self.k == 0 || self.k > steps {
            return Err(Error::Config(format!("draft k must lie in 1..={steps}")));
        }
        if !(self.clip_ratio > 0.0) || !(self.draft_noise >= 0.0) {
            return Err(Error::Config("clip_ratio must be positive and draft_noise >= 0".into()));
        }
        Ok(())
    }

    /// Inclusive integer stop range `[ceil(lo T), floor(hi T)]`.
    pub fn stop_range(&self, steps: usize) -> (usize, usize) {
        let lo = (self.stop_window.0 * steps as f64).ceil() as usize;
        let hi = ((self.stop_window.1 * steps as f64).floor() as usize).max(lo);
        (lo, hi.min(steps))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn finish<'t>(tape: &'t Tape, loss: Var<'t>, eps: &dyn EpsOnTape<'t>) -> Result<LossGrad> {
    let v = loss.item();
    if !v.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            what: format!("non-finite baseline loss {v}"),
        });
    }
    let grads = tape.grad(loss, &eps.params());
    Ok(LossGrad {
        loss: v,
        grad: grads.iter().flat_map(|g| g.value()).collect(),
    })
}

fn reward_field(reward: &Arc<RewardSpec>) -> Arc<dyn ScalarField> {
    reward.clone()
}

/// Per-batch normalized advantages; all zero when the rewards do not vary.
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    if rewards.len() < 2 || var <= 1e-24 * (1.0 + mean * mean) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / var.sqrt()).collect()
}

/// Clipped importance-ratio surrogate averaged over trajectories and the
/// weighted transition selection (normalized by `T`).
pub fn ddpo_loss(
    policy: &dyn EpsModel,
    behavior: &dyn EpsModel,
    trajectories: &[Trajectory],
    selection: &[(usize, f64)],
    reward: &RewardSpec,
    config: &BaselineConfig,
    schedule: &NoiseSchedule,
) -> Result<LossGrad> {
    let rewards: Vec<f64> = trajectories.iter().map(|tr| reward.reward(tr.terminal())).collect();
    ddpo_loss_with_rewards(policy, behavior, trajectories, &rewards, selection, config, schedule)
}

/// [`ddpo_loss`] with externally supplied terminal rewards.
pub fn ddpo_loss_with_rewards(
    policy: &dyn EpsModel,
    behavior: &dyn EpsModel,
    trajectories: &[Trajectory],
    rewards: &[f64],
    selection: &[(usize, f64)],
    config: &BaselineConfig,
    schedule: &NoiseSchedule,
) -> Result<LossGrad> {
    if trajectories.is_empty() || trajectories.len() != rewards.len() {
        return Err(Error::Empty("ddpo needs one reward per trajectory"));
    }
    let steps = schedule.steps();
    let adv = advantages(rewards);
    let tape = Tape::new();
    let eps = policy.bind_eps(&tape);
    let eps = eps.as_ref();
    let mut total = tape.scalar(0.0);
    let scale = 1.0 / (trajectories.len() * steps) as f64;
    let eps_clip = config.clip_ratio;
    for (tr, &a) in trajectories.iter().zip(&adv) {
        if a == 0.0 {
            continue;
        }
        for &(t, w) in selection {
            let x_t = tape.var_from(&tr.states[t]);
            let x_next = tape.var_from(&tr.states[t + 1]);
            let sigma = schedule.sigma(t);
            let lp = log_normal_on(x_next, policy_mean_on(eps, x_t, t, schedule), sigma);
            let (mb, _) = crate::schedule::forward_policy_params(
                behavior,
                &crate::schedule::DiffusionState { x: tr.states[t].clone(), t },
                schedule,
            )?;
            let lb = log_normal_on(x_next, tape.var(mb), sigma).item();
            let ratio = lp.add_const(-lb).exp();
            // max(-a r, -a clip(r)) = -min(a r, a clip(r)).
            let surrogate = ratio.scale(a).min(ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip).scale(a));
            total = total - surrogate.scale(w * scale);
        }
    }
    finish(&tape, total, eps)
}

/// `-log R(x_hat_theta(stopgrad x_t))` at a step drawn from the stop window.
pub fn refl_loss(
    policy: &dyn EpsModel,
    trajectory: &Trajectory,
    reward: &Arc<RewardSpec>,
    config: &BaselineConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<LossGrad> {
    let (lo, hi) = config.stop_range(schedule.steps());
    let t = rng.random_range(lo..=hi);
    refl_loss_at(policy, trajectory, reward, t, schedule)
}

pub fn refl_loss_at(
    policy: &dyn EpsModel,
    trajectory: &Trajectory,
    reward: &Arc<RewardSpec>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LossGrad> {
    let tape = Tape::new();
    let eps = policy.bind_eps(&tape);
    let x_t = tape.var_from(&trajectory.states[t]);
    let xhat = predict_clean_on(eps.as_ref(), x_t, t, schedule);
    let loss = -tape.field(xhat, &reward_field(reward));
    finish(&tape, loss, eps.as_ref())
}

/// DRaFT: re-roll the last `k` steps differentiably from
/// `stopgrad(x_{T-k})` with fresh noise and maximize `log R`. The `lv`
/// variant adds one noising step followed by one differentiable denoising
/// step before the reward.
pub fn draft_loss(
    policy: &dyn EpsModel,
    trajectory: &Trajectory,
    reward: &Arc<RewardSpec>,
    config: &BaselineConfig,
    lv: bool,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<LossGrad> {
    let steps = schedule.steps();
    let d = trajectory.terminal().len();
    let tape = Tape::new();
    let eps = policy.bind_eps(&tape);
    let eps_ref = eps.as_ref();
    let noise = |rng: &mut Rng, std: f64| tape.var(rng::normal_vec(rng, d).iter().map(|z| std * config.draft_noise * z).collect());
    let mut x = tape.var_from(&trajectory.states[steps - config.k]);
    for t in steps - config.k..steps {
        x = policy_mean_on(eps_ref, x, t, schedule) + noise(rng, schedule.sigma(t));
    }
    if lv {
        let t = steps - 1;
        let r = schedule.backward_ratio(t);
        let back = x.scale(r) + noise(rng, (1.0 - r * r).sqrt());
        x = policy_mean_on(eps_ref, back, t, schedule) + noise(rng, schedule.sigma(t));
    }
    let loss = -tape.field(x, &reward_field(reward));
    finish(&tape, loss, eps_ref)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{param_grad, Mlp, MlpSpec};
    use crate::schedule::{sample_trajectories, sample_trajectory};

    fn setup() -> (NoiseSchedule, Mlp, Arc<RewardSpec>) {
        let sched = NoiseSchedule::linear(6, 0.02, 0.4).unwrap();
        let net = Mlp::new(&MlpSpec::policy(2, 6).with_hidden(vec![8, 8]), &mut rng::rng_from(3, &[]));
        let reward = Arc::new(RewardSpec::gmm(vec![vec![1.0, 0.5], vec![-1.0, 0.0]], vec![0.6, 0.4], 0.7).unwrap());
        (sched, net, reward)
    }

    fn all_steps(steps: usize) -> Vec<(usize, f64)> {
        (0..steps).map(|t| (t, 1.0)).collect()
    }

    #[test]
    fn advantages_are_normalized_and_shift_invariant() {
        let a = advantages(&[1.0, 2.0, 4.0]);
        assert!(a.iter().sum::<f64>().abs() < 1e-12);
        assert!((a.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        let b = advantages(&[11.0, 12.0, 14.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
        assert_eq!(advantages(&[2.0, 2.0]), vec![0.0, 0.0]);
        assert_eq!(advantages(&[5.0]), vec![0.0]);
    }

    #[test]
    fn ddpo_vanishes_without_advantage() {
        let (sched, net, reward) = setup();
        let trajs = sample_trajectories(&net, &sched, 2, &[1]).unwrap();
        let lg = ddpo_loss(&net, &net, &trajs, &all_steps(6), &reward, &BaselineConfig::default(), &sched).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert!(lg.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn ddpo_is_reward_shift_invariant() {
        let (sched, net, reward) = setup();
        let trajs = sample_trajectories(&net, &sched, 2, &[1, 2, 3, 4]).unwrap();
        let mut behavior = net.clone();
        let mut v = behavior.to_flat();
        v.iter_mut().for_each(|x| *x *= 1.05);
        behavior.set_flat(&v).unwrap();
        let cfg = BaselineConfig::default();
        let sel = all_steps(6);
        let rewards: Vec<f64> = trajs.iter().map(|t| reward.reward(t.terminal())).collect();
        let shifted: Vec<f64> = rewards.iter().map(|r| r + 3.0).collect();
        let a = ddpo_loss_with_rewards(&net, &behavior, &trajs, &rewards, &sel, &cfg, &sched).unwrap();
        let b = ddpo_loss_with_rewards(&net, &behavior, &trajs, &shifted, &sel, &cfg, &sched).unwrap();
        assert!(a.loss != 0.0);
        assert!((a.loss - b.loss).abs() <= 1e-10);
        // policy = behavior: every ratio is 1, so the loss is minus the mean advantage.
        let c = ddpo_loss(&net, &net, &trajs, &sel, &reward, &cfg, &sched).unwrap();
        assert!(c.loss.abs() < 1e-12);
    }

    fn fd_check(net: &Mlp, f: impl Fn(&Mlp) -> LossGrad) {
        let base = f(net);
        assert_eq!(net.num_params(), base.grad.len());
        let flat = net.to_flat();
        let h = 1e-5;
        for i in (0..flat.len()).step_by(7) {
            let mut p = net.clone();
            let mut v = flat.clone();
            v[i] += h;
            p.set_flat(&v).unwrap();
            let up = f(&p).loss;
            v[i] -= 2.0 * h;
            p.set_flat(&v).unwrap();
            let dn = f(&p).loss;
            let fd = (up - dn) / (2.0 * h);
            let an = base.grad[i];
            assert!((fd - an).abs() <= 1e-4 * (1.0 + an.abs()), "param {i}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        let (sched, net, reward) = setup();
        let trajs = sample_trajectories(&net, &sched, 2, &[5, 6, 7]).unwrap();
        let mut behavior = net.clone();
        let mut v = behavior.to_flat();
        v.iter_mut().for_each(|x| *x *= 1.02);
        behavior.set_flat(&v).unwrap();
        let cfg = BaselineConfig::default();
        fd_check(&net, |p| ddpo_loss(p, &behavior, &trajs, &all_steps(6), &reward, &cfg, &sched).unwrap());
        fd_check(&net, |p| refl_loss_at(p, &trajs[0], &reward, 4, &sched).unwrap());
        for (k, lv) in [(1, false), (3, false), (2, true)] {
            let cfg = BaselineConfig { k, ..Default::default() };
            fd_check(&net, |p| draft_loss(p, &trajs[1], &reward, &cfg, lv, &sched, &mut rng::rng_from(9, &[])).unwrap());
        }
    }

    #[test]
    fn constant_reward_gives_zero_gradient() {
        let (sched, net, _) = setup();
        let flat = Arc::new(RewardSpec::constant(2));
        let tr = sample_trajectory(&net, &sched, 2, 4).unwrap();
        let cfg = BaselineConfig::default();
        let lg = refl_loss(&net, &tr, &flat, &cfg, &sched, &mut rng::rng_from(1, &[])).unwrap();
        assert!(lg.grad.iter().all(|g| *g == 0.0));
        let lg = draft_loss(&net, &tr, &flat, &cfg, true, &sched, &mut rng::rng_from(1, &[])).unwrap();
        assert!(lg.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn refl_at_terminal_has_no_gradient_path() {
        let (sched, net, reward) = setup();
        let tr = sample_trajectory(&net, &sched, 2, 4).unwrap();
        let lg = refl_loss_at(&net, &tr, &reward, 6, &sched).unwrap();
        assert!((lg.loss + reward.log_reward(tr.terminal())).abs() < 1e-12);
        assert!(lg.grad.iter().all(|g| *g == 0.0));
        assert_eq!(BaselineConfig::default().stop_range(20), (14, 19));
    }

    #[test]
    fn noiseless_draft_one_differentiates_the_last_mean() {
        let (sched, net, reward) = setup();
        let tr = sample_trajectory(&net, &sched, 2, 8).unwrap();
        let cfg = BaselineConfig { draft_noise: 0.0, ..Default::default() };
        let lg = draft_loss(&net, &tr, &reward, &cfg, false, &sched, &mut rng::rng_from(1, &[])).unwrap();
        let (v, g) = param_grad(&net, |tape, eps| {
            let mean = policy_mean_on(eps, tape.var_from(&tr.states[5]), 5, &sched);
            let f: Arc<dyn ScalarField> = reward.clone();
            -tape.field(mean, &f)
        })
        .unwrap();
        assert!((v - lg.loss).abs() < 1e-14);
        for (a, b) in g.iter().zip(&lg.grad) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

//! DDPM noising schedule and the denoising MDP built on it.
//!
//! Time runs in the sampling direction: state `t = 0` is pure noise and
//! `t = T` is data. The schedule itself is indexed by diffusion time
//! `s = T - t`, so `alpha_bar[0] = 1` belongs to clean data.
//!
//! A transition `x_t -> x_{t+1}` is one ancestral DDPM step. The forward
//! (denoising) policy is `N(mu_theta(x_t), sigma_t^2 I)` and the backward
//! (noising) policy is the fixed kernel `N(r_t x_{t+1}, (1 - r_t^2) I)` with
//! `r_t^2 = alpha_bar[s] / alpha_bar[s - 1]`. The policy variance is pinned to
//! the noising variance, `sigma_t^2 = 1 - r_t^2`.
//!
//! `alpha_bar` is always the cumulative signal coefficient.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nets::{EpsModel, EpsOnTape};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-in-`s` variance schedule `beta_s` from `beta_start` (s = 1) to
    /// `beta_end` (s = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::Config(format!(
                "beta endpoints must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for s in 1..=steps {
            let frac = if steps == 1 {
                0.0
            } else {
                (s - 1) as f64 / (steps - 1) as f64
            };
            let beta = beta_start + frac * (beta_end - beta_start);
            alpha_bar.push(alpha_bar[s - 1] * (1.0 - beta));
        }
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Config("alpha_bar needs T + 1 >= 2 entries".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::Config(format!(
                "alpha_bar[0] must be exactly 1, got {}",
                alpha_bar[0]
            )));
        }
        for w in alpha_bar.windows(2) {
            if !(w[1] < w[0] && w[1] > 0.0) {
                return Err(Error::Config(format!(
                    "alpha_bar must be strictly decreasing in (0, 1], got {} after {}",
                    w[1], w[0]
                )));
            }
        }
        let steps = alpha_bar.len() - 1;
        let sigma = (0..steps)
            .map(|t| {
                let s = steps - t;
                (1.0 - alpha_bar[s] / alpha_bar[s - 1]).sqrt()
            })
            .collect();
        Ok(Self { alpha_bar, sigma })
    }

    /// Number of transitions `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// Cumulative signal coefficients indexed by diffusion time.
    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha_bar` of the state at sampling step `t`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[self.steps() - t]
    }

    /// Policy standard deviations per transition index.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Mean coefficient `r_t` of the backward kernel of transition `t`.
    pub fn backward_ratio(&self, t: usize) -> f64 {
        let s = self.steps() - t;
        (self.alpha_bar[s] / self.alpha_bar[s - 1]).sqrt()
    }

    /// `(a_t, b_t)` with `mu = a_t x_t - b_t eps(x_t)` for transition `t`.
    pub fn eps_coefficients(&self, t: usize) -> (f64, f64) {
        let s = self.steps() - t;
        let alpha = self.alpha_bar[s] / self.alpha_bar[s - 1];
        let beta = 1.0 - alpha;
        let a = 1.0 / alpha.sqrt();
        (a, beta / (alpha.sqrt() * (1.0 - self.alpha_bar[s]).sqrt()))
    }
}

/// A noisy sample together with its sampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x: Vec<f64>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub x_t: Vec<f64>,
    pub x_next: Vec<f64>,
    pub t: usize,
}

/// A full sampling path `x_0 .. x_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn transition(&self, t: usize) -> Transition {
        Transition {
            x_t: self.states[t].clone(),
            x_next: self.states[t + 1].clone(),
            t,
        }
    }
}

/// Draw `x_0` from the standard Gaussian prior.
pub fn initial_sample(d: usize, rng: &mut Rng) -> Vec<f64> {
    assert!(d >= 1, "dimension must be at least 1");
    rng::normal_vec(rng, d)
}

/// Denoising policy parameters at `state` (requires `state.t < T`).
pub fn forward_policy_params(
    policy: &dyn EpsModel,
    state: &DiffusionState,
    schedule: &NoiseSchedule,
) -> Result<(Vec<f64>, f64)> {
    if state.t >= schedule.steps() {
        return Err(Error::Precondition(format!(
            "forward policy needs t < T, got t = {}",
            state.t
        )));
    }
    let eps = policy.eps(&state.x, state.t);
    if eps.iter().any(|e| !e.is_finite()) {
        return Err(Error::Numerical {
            step: state.t,
            what: "non-finite network output".into(),
        });
    }
    let (a, b) = schedule.eps_coefficients(state.t);
    let mean = state.x.iter().zip(&eps).map(|(x, e)| a * x - b * e).collect();
    Ok((mean, schedule.sigma(state.t)))
}

/// Noising kernel `P_B(x_t | x_{t+1})` for transition `t`.
pub fn backward_policy_params(x_next: &[f64], t: usize, schedule: &NoiseSchedule) -> (Vec<f64>, f64) {
    assert!(t < schedule.steps(), "backward policy needs t < T");
    let r = schedule.backward_ratio(t);
    (x_next.iter().map(|x| r * x).collect(), (1.0 - r * r).sqrt())
}

/// `q(x_t | x_T)`.
pub fn marginal_noising(x_terminal: &[f64], t: usize, schedule: &NoiseSchedule) -> (Vec<f64>, f64) {
    assert!(t <= schedule.steps(), "marginal needs t <= T");
    let ab = schedule.alpha_bar_at(t);
    (
        x_terminal.iter().map(|x| ab.sqrt() * x).collect(),
        (1.0 - ab).sqrt(),
    )
}

/// One-step estimate of clean data from a noisy state.
pub fn predict_clean(policy: &dyn EpsModel, state: &DiffusionState, schedule: &NoiseSchedule) -> Vec<f64> {
    if state.t == schedule.steps() {
        return state.x.clone();
    }
    let ab = schedule.alpha_bar_at(state.t);
    let eps = policy.eps(&state.x, state.t);
    state
        .x
        .iter()
        .zip(&eps)
        .map(|(x, e)| (x - (1.0 - ab).sqrt() * e) / ab.sqrt())
        .collect()
}

/// Ancestral DDPM step expressed through predicted clean data: the Gaussian
/// for `x_{t_next}` given `x_hat` and the current state `x_t`.
pub fn back_project(x_hat: &[f64], x_t: &[f64], t_next: usize, schedule: &NoiseSchedule) -> (Vec<f64>, f64) {
    assert!(t_next >= 1 && t_next <= schedule.steps(), "back_project needs 1 <= t_next <= T");
    let t = t_next - 1;
    let steps = schedule.steps();
    let s = steps - t;
    let ab = schedule.alpha_bar();
    let alpha = ab[s] / ab[s - 1];
    let c_clean = ab[s - 1].sqrt() * (1.0 - alpha) / (1.0 - ab[s]);
    let c_state = alpha.sqrt() * (1.0 - ab[s - 1]) / (1.0 - ab[s]);
    let mean = x_hat
        .iter()
        .zip(x_t)
        .map(|(h, x)| c_clean * h + c_state * x)
        .collect();
    (mean, schedule.sigma(t))
}

/// One ancestral step for a batch of states sharing step `t`.
fn step_batch(
    policy: &dyn EpsModel,
    schedule: &NoiseSchedule,
    xs: &[Vec<f64>],
    t: usize,
    rngs: &mut [Rng],
) -> Result<Vec<Vec<f64>>> {
    let eps = policy.eps_batch(xs, t);
    let (a, b) = schedule.eps_coefficients(t);
    let std = schedule.sigma(t);
    xs.iter()
        .zip(&eps)
        .zip(rngs.iter_mut())
        .map(|((x, e), rng)| {
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    step: t,
                    what: "non-finite network output".into(),
                });
            }
            let z = rng::normal_vec(rng, x.len());
            Ok(x.iter()
                .zip(e)
                .zip(&z)
                .map(|((xi, ei), zi)| a * xi - b * ei + std * zi)
                .collect())
        })
        .collect()
}

/// Sample one trajectory per seed; each RNG stream is keyed by its seed
/// alone, so the result does not depend on batching.
pub fn sample_trajectories(
    policy: &dyn EpsModel,
    schedule: &NoiseSchedule,
    d: usize,
    seeds: &[u64],
) -> Result<Vec<Trajectory>> {
    let mut rngs: Vec<Rng> = seeds.iter().map(|s| rng::rng_from(*s, &[])).collect();
    let mut paths: Vec<Vec<Vec<f64>>> = rngs
        .iter_mut()
        .map(|r| {
            let mut v = Vec::with_capacity(schedule.steps() + 1);
            v.push(initial_sample(d, r));
            v
        })
        .collect();
    let mut current: Vec<Vec<f64>> = paths.iter().map(|p| p[0].clone()).collect();
    for t in 0..schedule.steps() {
        current = step_batch(policy, schedule, &current, t, &mut rngs)?;
        for (p, x) in paths.iter_mut().zip(&current) {
            p.push(x.clone());
        }
    }
    Ok(paths
        .into_iter()
        .zip(seeds)
        .map(|(states, seed)| Trajectory { states, seed: *seed })
        .collect())
}

/// Sample a trajectory; the RNG stream is keyed entirely by `seed`.
pub fn sample_trajectory(
    policy: &dyn EpsModel,
    schedule: &NoiseSchedule,
    d: usize,
    seed: u64,
) -> Result<Trajectory> {
    Ok(sample_trajectories(policy, schedule, d, &[seed])?.pop().unwrap())
}

/// Terminal samples of `n` trajectories; sample `i` uses the seed
/// `derive_seed(base, [i])` and equals the terminal of `sample_trajectory`
/// with that seed.
pub fn sample_terminals(
    policy: &dyn EpsModel,
    schedule: &NoiseSchedule,
    d: usize,
    n: usize,
    base: u64,
) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    const CHUNK: usize = 1024;
    let chunks: Vec<Vec<Vec<f64>>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let range = c * CHUNK..((c + 1) * CHUNK).min(n);
            let mut rngs: Vec<Rng> = range.map(|i| rng::rng_from(rng::derive_seed(base, &[i as u64]), &[])).collect();
            let mut xs: Vec<Vec<f64>> = rngs.iter_mut().map(|r| initial_sample(d, r)).collect();
            for t in 0..schedule.steps() {
                xs = step_batch(policy, schedule, &xs, t, &mut rngs)?;
            }
            Ok(xs)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// `mu_theta(x_t)` as a tape node.
pub fn policy_mean_on<'t>(eps: &dyn EpsOnTape<'t>, x: Var<'t>, t: usize, schedule: &NoiseSchedule) -> Var<'t> {
    let (a, b) = schedule.eps_coefficients(t);
    x.scale(a) - eps.eps(x, t).scale(b)
}

/// `x_hat_theta(x_t)` as a tape node.
pub fn predict_clean_on<'t>(eps: &dyn EpsOnTape<'t>, x: Var<'t>, t: usize, schedule: &NoiseSchedule) -> Var<'t> {
    if t == schedule.steps() {
        return x;
    }
    let ab = schedule.alpha_bar_at(t);
    (x - eps.eps(x, t).scale((1.0 - ab).sqrt())).scale(1.0 / ab.sqrt())
}

//! Scores and losses for gradient-informed detailed balance.
//!
//! Score functions come in two forms: plain vectors for inspection and
//! tape nodes for training. On the tape, the reverse policy score is a
//! vector-Jacobian product of the policy mean, recorded so that the loss can
//! be differentiated again with respect to the network parameters.
//!
//! Conventions: the forward direction differentiates in `x_{t+1}`, the
//! reverse direction in `x_t`. Flow-score callbacks receive a state and its
//! own step index, so the forward loss evaluates the flow at `(x_{t+1}, t+1)`
//! and the forward-looking scale there is `gamma_{t+1}`.
//!
//! Pretrained quantities depend only on stored states and are evaluated
//! numerically, entering the tape as constants.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::autodiff::{ScalarField, Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{flatten_grads, BoundMlp, EpsModel, EpsOnTape, Mlp};
use crate::rewards::{RewardSpec, DEFAULT_SMOOTH_SAMPLES, DEFAULT_SMOOTH_VAR};
use crate::rng::{self, Rng};
use crate::schedule::{policy_mean_on, predict_clean_on, NoiseSchedule, Trajectory, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// Forward-looking scale `gamma_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gamma {
    /// `gamma_t = alpha_bar[T - t]`.
    AlphaBar,
    /// `gamma_t = 1` (no attenuation).
    One,
}

/// Network whose clean-state prediction anchors the first-order
/// forward-looking term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlAnchor {
    /// The policy being trained (held constant within a step).
    Policy,
    /// The frozen pretrained network.
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbVariant {
    Plain,
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub w_f: f64,
    pub w_b: f64,
    pub gamma: Gamma,
    pub fl_anchor: FlAnchor,
    pub lambda_reg: f64,
    pub eta: f64,
    pub second_order: bool,
    pub use_correction: bool,
    /// Variance of the reward-gradient smoothing noise (0 disables it).
    pub smooth_c: f64,
    pub smooth_n: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            w_f: 1.0,
            w_b: 1.0,
            gamma: Gamma::AlphaBar,
            fl_anchor: FlAnchor::Policy,
            lambda_reg: 0.0,
            eta: 1.0,
            second_order: false,
            use_correction: false,
            smooth_c: DEFAULT_SMOOTH_VAR,
            smooth_n: DEFAULT_SMOOTH_SAMPLES,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if !(self.lambda_reg >= 0.0) {
            return bad("lambda_reg must be non-negative");
        }
        if !(self.w_f >= 0.0 && self.w_b >= 0.0) {
            return bad("w_f and w_b must be non-negative");
        }
        if !(self.smooth_c >= 0.0) || self.smooth_n == 0 {
            return bad("smoothing needs c >= 0 and at least one sample");
        }
        Ok(())
    }

    pub fn gamma_at(&self, t: usize, schedule: &NoiseSchedule) -> f64 {
        match self.gamma {
            Gamma::AlphaBar => schedule.alpha_bar_at(t),
            Gamma::One => 1.0,
        }
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn axpy(k: f64, a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| k * x + y).collect()
}

fn policy_mean(policy: &dyn EpsModel, x: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    let (a, b) = schedule.eps_coefficients(t);
    let eps = policy.eps(x, t);
    x.iter().zip(&eps).map(|(xi, e)| a * xi - b * e).collect()
}

/// `J_mu(x)ᵀ c` for the policy mean at step `t`.
fn mean_vjp(policy: &dyn EpsModel, x: &[f64], t: usize, c: &[f64], schedule: &NoiseSchedule) -> Vec<f64> {
    let (a, b) = schedule.eps_coefficients(t);
    let je = policy.eps_vjp(x, t, c);
    c.iter().zip(&je).map(|(ci, j)| a * ci - b * j).collect()
}

/// Score of `log P_F(x_{t+1} | x_t)` in the given argument.
pub fn policy_score(dir: Direction, policy: &dyn EpsModel, tr: &Transition, schedule: &NoiseSchedule) -> Vec<f64> {
    let mu = policy_mean(policy, &tr.x_t, tr.t, schedule);
    let s2 = schedule.sigma(tr.t).powi(2);
    match dir {
        Direction::Forward => mu.iter().zip(&tr.x_next).map(|(m, x)| (m - x) / s2).collect(),
        Direction::Reverse => {
            let c: Vec<f64> = tr.x_next.iter().zip(&mu).map(|(x, m)| (x - m) / s2).collect();
            mean_vjp(policy, &tr.x_t, tr.t, &c, schedule)
        }
    }
}

/// Score of the noising kernel `log P_B(x_t | x_{t+1})` in the given argument.
pub fn backward_score(dir: Direction, tr: &Transition, schedule: &NoiseSchedule) -> Vec<f64> {
    let r = schedule.backward_ratio(tr.t);
    let s2 = 1.0 - r * r;
    let resid: Vec<f64> = tr.x_t.iter().zip(&tr.x_next).map(|(x, xn)| x - r * xn).collect();
    match dir {
        Direction::Forward => resid.iter().map(|v| r * v / s2).collect(),
        Direction::Reverse => resid.iter().map(|v| -v / s2).collect(),
    }
}

/// `grad log P_F - eta grad log P_F#` in the given argument.
pub fn residual_policy_score(
    dir: Direction,
    policy: &dyn EpsModel,
    pretrained: &dyn EpsModel,
    tr: &Transition,
    schedule: &NoiseSchedule,
    eta: f64,
) -> Vec<f64> {
    let a = policy_score(dir, policy, tr, schedule);
    let b = policy_score(dir, pretrained, tr, schedule);
    axpy(-eta, &b, &a)
}

/// Forward-looking residual flow score
/// `beta gamma_t grad_x log R(x_hat(x)) + g_phi(x)`.
#[allow(clippy::too_many_arguments)]
pub fn fl_flow_score(
    g_phi: Option<&Mlp>,
    policy: &dyn EpsModel,
    x: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    reward: &RewardSpec,
    weights: &LossWeights,
    rng: &mut Rng,
) -> Vec<f64> {
    let term = fl_reward_term(policy, x, t, schedule, reward, weights, rng);
    match g_phi {
        Some(g) => term.iter().zip(g.eval(x, t)).map(|(a, b)| a + b).collect(),
        None => term,
    }
}

fn fl_reward_term(
    policy: &dyn EpsModel,
    x: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    reward: &RewardSpec,
    weights: &LossWeights,
    rng: &mut Rng,
) -> Vec<f64> {
    let k = weights.beta * weights.gamma_at(t, schedule);
    if t == schedule.steps() {
        let g = reward.smoothed_log_reward_grad(x, weights.smooth_c, weights.smooth_n, rng);
        return g.iter().map(|v| k * v).collect();
    }
    let ab = schedule.alpha_bar_at(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps = policy.eps(x, t);
    let xhat: Vec<f64> = x.iter().zip(&eps).map(|(xi, e)| (xi - sn * e) / sa).collect();
    let g = reward.smoothed_log_reward_grad(&xhat, weights.smooth_c, weights.smooth_n, rng);
    let je = policy.eps_vjp(x, t, &g);
    g.iter().zip(&je).map(|(gi, j)| k * (gi - sn * j) / sa).collect()
}

// ---------------------------------------------------------------------------
// Tape building blocks.

/// `log N(x; mean, std^2 I)`.
pub fn log_normal_on<'t>(x: Var<'t>, mean: Var<'t>, std: f64) -> Var<'t> {
    let d = x.len() as f64;
    (x - mean)
        .norm_sq()
        .scale(-0.5 / (std * std))
        .add_const(-d * (std * (2.0 * PI).sqrt()).ln())
}

pub fn policy_score_on<'t>(
    dir: Direction,
    eps: &dyn EpsOnTape<'t>,
    x_t: Var<'t>,
    x_next: Var<'t>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Var<'t> {
    let mu = policy_mean_on(eps, x_t, t, schedule);
    let inv = 1.0 / schedule.sigma(t).powi(2);
    match dir {
        Direction::Forward => (mu - x_next).scale(inv),
        Direction::Reverse => {
            let seed = (x_next - mu).scale(inv);
            x_t.tape().vjp(mu, seed, &[x_t])[0]
        }
    }
}

pub fn backward_score_on<'t>(dir: Direction, x_t: Var<'t>, x_next: Var<'t>, t: usize, schedule: &NoiseSchedule) -> Var<'t> {
    let r = schedule.backward_ratio(t);
    let s2 = 1.0 - r * r;
    let resid = x_t - x_next.scale(r);
    match dir {
        Direction::Forward => resid.scale(r / s2),
        Direction::Reverse => resid.scale(-1.0 / s2),
    }
}

/// Residual policy score with the pretrained part evaluated numerically.
#[allow(clippy::too_many_arguments)]
pub fn residual_policy_score_on<'t>(
    dir: Direction,
    eps: &dyn EpsOnTape<'t>,
    pretrained: &dyn EpsModel,
    x_t: Var<'t>,
    x_next: Var<'t>,
    t: usize,
    schedule: &NoiseSchedule,
    eta: f64,
) -> Var<'t> {
    let tr = Transition {
        x_t: x_t.value(),
        x_next: x_next.value(),
        t,
    };
    let pre = policy_score(dir, pretrained, &tr, schedule);
    let theta = policy_score_on(dir, eps, x_t, x_next, t, schedule);
    theta - x_t.tape().var(pre.iter().map(|v| eta * v).collect())
}

/// Everything the forward-looking flow score needs besides the networks.
pub struct FlContext<'a> {
    pub schedule: &'a NoiseSchedule,
    pub reward: &'a Arc<RewardSpec>,
    pub weights: &'a LossWeights,
}

impl FlContext<'_> {
    /// `beta gamma_t grad_x log R(x_hat_theta(x)) + g(x)` on the tape.
    ///
    /// Without `second_order` the reward term is a constant node; with it
    /// the term is differentiated through `x_hat_theta` and the reward
    /// Hessian.
    pub fn flow_score_on<'t>(
        &self,
        policy: &dyn EpsModel,
        eps: &dyn EpsOnTape<'t>,
        g: Option<&BoundMlp<'t>>,
        x: Var<'t>,
        t: usize,
        rng: &mut Rng,
    ) -> Var<'t> {
        let tape = x.tape();
        let w = self.weights;
        let k = w.beta * w.gamma_at(t, self.schedule);
        let term = if w.second_order && t < self.schedule.steps() {
            let xhat = predict_clean_on(eps, x, t, self.schedule);
            let field: Arc<dyn ScalarField> = self.reward.clone();
            let grad = if w.smooth_c == 0.0 {
                tape.field_grad(xhat, &field)
            } else {
                let sd = w.smooth_c.sqrt();
                let mut acc = None;
                for _ in 0..w.smooth_n {
                    let z: Vec<f64> = rng::normal_vec(rng, x.len()).iter().map(|v| sd * v).collect();
                    let gi = tape.field_grad(xhat + tape.var(z), &field);
                    acc = Some(match acc {
                        None => gi,
                        Some(a) => a + gi,
                    });
                }
                acc.unwrap().scale(1.0 / w.smooth_n as f64)
            };
            tape.vjp(xhat, grad, &[x])[0].scale(k)
        } else {
            tape.var(fl_reward_term(policy, &x.value(), t, self.schedule, self.reward, w, rng))
        };
        match g {
            Some(g) => term + g.forward(x, t),
            None => term,
        }
    }

    /// `beta log R(x_hat_theta(x))` on the tape (no forward-looking scale).
    pub fn log_reward_on<'t>(&self, policy: &dyn EpsModel, eps: &dyn EpsOnTape<'t>, x: Var<'t>, t: usize) -> Var<'t> {
        let tape = x.tape();
        let beta = self.weights.beta;
        if t == self.schedule.steps() {
            return tape.scalar(beta * self.reward.log_reward(&x.value()));
        }
        if self.weights.second_order {
            let field: Arc<dyn ScalarField> = self.reward.clone();
            tape.field(predict_clean_on(eps, x, t, self.schedule), &field).scale(beta)
        } else {
            let xhat = crate::schedule::predict_clean(
                policy,
                &crate::schedule::DiffusionState { x: x.value(), t },
                self.schedule,
            );
            tape.scalar(beta * self.reward.log_reward(&xhat))
        }
    }
}

/// A flow-score callback: state node and its step to a score node.
pub type FlowScoreFn<'a, 't> = dyn FnMut(Var<'t>, usize) -> Var<'t> + 'a;

/// Pin a closure to a single tape lifetime.
pub fn flow_fn<'t, F: FnMut(Var<'t>, usize) -> Var<'t>>(f: F) -> F {
    f
}

/// `grad-DB` loss in the given direction.
pub fn loss_grad_db_on<'t>(
    dir: Direction,
    eps: &dyn EpsOnTape<'t>,
    flow: &mut FlowScoreFn<'_, 't>,
    x_t: Var<'t>,
    x_next: Var<'t>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Var<'t> {
    let ps = policy_score_on(dir, eps, x_t, x_next, t, schedule);
    let bs = backward_score_on(dir, x_t, x_next, t, schedule);
    match dir {
        Direction::Forward => (ps - bs - flow(x_next, t + 1)).norm_sq(),
        Direction::Reverse => (ps - bs + flow(x_t, t)).norm_sq(),
    }
}

/// `|flow(x_T) - beta grad log R(x_T)|^2`.
pub fn loss_grad_db_terminal_on<'t>(
    flow: &mut FlowScoreFn<'_, 't>,
    x_terminal: Var<'t>,
    steps: usize,
    reward: &RewardSpec,
    beta: f64,
) -> Var<'t> {
    let target: Vec<f64> = reward.log_reward_grad(&x_terminal.value()).iter().map(|g| beta * g).collect();
    (flow(x_terminal, steps) - x_terminal.tape().var(target)).norm_sq()
}

/// Residual `grad-DB` loss; with a forward-looking flow score this is the
/// FL-residual loss.
#[allow(clippy::too_many_arguments)]
pub fn loss_res_grad_db_on<'t>(
    dir: Direction,
    eps: &dyn EpsOnTape<'t>,
    pretrained: &dyn EpsModel,
    flow: &mut FlowScoreFn<'_, 't>,
    x_t: Var<'t>,
    x_next: Var<'t>,
    t: usize,
    schedule: &NoiseSchedule,
    eta: f64,
) -> Var<'t> {
    let rs = residual_policy_score_on(dir, eps, pretrained, x_t, x_next, t, schedule, eta);
    match dir {
        Direction::Forward => (rs - flow(x_next, t + 1)).norm_sq(),
        Direction::Reverse => (rs + flow(x_t, t)).norm_sq(),
    }
}

/// Residual loss with the pairwise correction `h(x_t, x_{t+1})`.
#[allow(clippy::too_many_arguments)]
pub fn corrected_residual_loss_on<'t>(
    dir: Direction,
    eps: &dyn EpsOnTape<'t>,
    pretrained: &dyn EpsModel,
    flow: &mut FlowScoreFn<'_, 't>,
    h: &BoundMlp<'t>,
    x_t: Var<'t>,
    x_next: Var<'t>,
    t: usize,
    schedule: &NoiseSchedule,
    eta: f64,
) -> Var<'t> {
    let rs = residual_policy_score_on(dir, eps, pretrained, x_t, x_next, t, schedule, eta);
    let hv = h.forward_parts(&[x_t, x_next], t);
    let gh = x_t.tape().grad(hv, &[x_t, x_next]);
    match dir {
        Direction::Forward => (rs - flow(x_next, t + 1) + gh[1]).norm_sq(),
        Direction::Reverse => (rs + flow(x_t, t) + gh[0]).norm_sq(),
    }
}

/// `|g(x_T)|^2`.
pub fn loss_terminal_fl_on<'t>(g: &BoundMlp<'t>, x_terminal: Var<'t>, steps: usize) -> Var<'t> {
    g.forward(x_terminal, steps).norm_sq()
}

/// Balance of residual scores on the shared middle state `x_{t+1}`.
#[allow(clippy::too_many_arguments)]
pub fn loss_bidirectional_on<'t>(
    eps: &dyn EpsOnTape<'t>,
    pretrained: &dyn EpsModel,
    x0: Var<'t>,
    x1: Var<'t>,
    x2: Var<'t>,
    t: usize,
    schedule: &NoiseSchedule,
    eta: f64,
) -> Var<'t> {
    let f = residual_policy_score_on(Direction::Forward, eps, pretrained, x0, x1, t, schedule, eta);
    let r = residual_policy_score_on(Direction::Reverse, eps, pretrained, x1, x2, t + 1, schedule, eta);
    (f + r).norm_sq()
}

/// Scalar log-DB loss with forward-looking log-flows
/// `log F(x) = beta log R(x_hat(x)) + f(x)`.
///
/// `Plain` balances `P_F F(x_t)` against `P_B F(x_{t+1})`; `Residual`
/// balances `(P_F / P_F#) F~(x_t)` against `F~(x_{t+1})`.
#[allow(clippy::too_many_arguments)]
pub fn loss_db_fl_on<'t>(
    variant: DbVariant,
    policy: &dyn EpsModel,
    eps: &dyn EpsOnTape<'t>,
    pretrained: Option<&dyn EpsModel>,
    scalar_flow: &mut FlowScoreFn<'_, 't>,
    x_t: Var<'t>,
    x_next: Var<'t>,
    t: usize,
    fl: &FlContext<'_>,
) -> Result<Var<'t>> {
    let tape = x_t.tape();
    let schedule = fl.schedule;
    let sigma = schedule.sigma(t);
    let log_pf = log_normal_on(x_next, policy_mean_on(eps, x_t, t, schedule), sigma);
    let log_f_t = fl.log_reward_on(policy, eps, x_t, t) + scalar_flow(x_t, t);
    let log_f_n = fl.log_reward_on(policy, eps, x_next, t + 1) + scalar_flow(x_next, t + 1);
    let other = match variant {
        DbVariant::Plain => {
            let r = schedule.backward_ratio(t);
            let std = (1.0 - r * r).sqrt();
            log_normal_on(x_t, x_next.scale(r), std)
        }
        DbVariant::Residual => {
            let pre = pretrained.ok_or_else(|| Error::Precondition("residual DB needs a pretrained policy".into()))?;
            let mu = policy_mean(pre, &x_t.value(), t, schedule);
            log_normal_on(x_next, tape.var(mu), sigma)
        }
    };
    let diff = log_pf + log_f_t - other - log_f_n;
    let v = diff.item();
    if !v.is_finite() {
        return Err(Error::Numerical {
            step: t,
            what: "non-finite log-density in DB loss".into(),
        });
    }
    Ok(diff.square())
}

/// `|eps_theta(x_t) - eps_prev(x_t)|^2`.
pub fn output_regularization_on<'t>(eps: &dyn EpsOnTape<'t>, prev: &dyn EpsModel, x_t: Var<'t>, t: usize) -> Var<'t> {
    let e_prev = prev.eps(&x_t.value(), t);
    (eps.eps(x_t, t) - x_t.tape().var(e_prev)).norm_sq()
}

// ---------------------------------------------------------------------------
// Numeric wrappers around the tape losses.

fn with_policy<R>(policy: &dyn EpsModel, f: impl for<'t> FnOnce(&'t Tape, &dyn EpsOnTape<'t>) -> R) -> R {
    let tape = Tape::new();
    let eps = policy.bind_eps(&tape);
    f(&tape, eps.as_ref())
}

pub fn loss_grad_db(
    dir: Direction,
    policy: &dyn EpsModel,
    flow_score: &dyn Fn(&[f64], usize) -> Vec<f64>,
    tr: &Transition,
    schedule: &NoiseSchedule,
) -> f64 {
    with_policy(policy, |tape, eps| {
        let mut flow = flow_fn(|x, s| tape.var(flow_score(&x.value(), s)));
        loss_grad_db_on(dir, eps, &mut flow, tape.var_from(&tr.x_t), tape.var_from(&tr.x_next), tr.t, schedule).item()
    })
}

pub fn loss_grad_db_terminal(
    flow_score: &dyn Fn(&[f64], usize) -> Vec<f64>,
    x_terminal: &[f64],
    steps: usize,
    reward: &RewardSpec,
    beta: f64,
) -> f64 {
    let tape = Tape::new();
    let mut flow = flow_fn(|x, s| tape.var(flow_score(&x.value(), s)));
    loss_grad_db_terminal_on(&mut flow, tape.var_from(x_terminal), steps, reward, beta).item()
}

pub fn loss_res_grad_db(
    dir: Direction,
    policy: &dyn EpsModel,
    pretrained: &dyn EpsModel,
    residual_flow_score: &dyn Fn(&[f64], usize) -> Vec<f64>,
    tr: &Transition,
    schedule: &NoiseSchedule,
    eta: f64,
) -> f64 {
    with_policy(policy, |tape, eps| {
        let mut flow = flow_fn(|x, s| tape.var(residual_flow_score(&x.value(), s)));
        loss_res_grad_db_on(
            dir,
            eps,
            pretrained,
            &mut flow,
            tape.var_from(&tr.x_t),
            tape.var_from(&tr.x_next),
            tr.t,
            schedule,
            eta,
        )
        .item()
    })
}

pub fn loss_bidirectional(
    policy: &dyn EpsModel,
    pretrained: &dyn EpsModel,
    states: [&[f64]; 3],
    t: usize,
    schedule: &NoiseSchedule,
) -> f64 {
    with_policy(policy, |tape, eps| {
        let [a, b, c] = states.map(|s| tape.var_from(s));
        loss_bidirectional_on(eps, pretrained, a, b, c, t, schedule, 1.0).item()
    })
}

#[allow(clippy::too_many_arguments)]
pub fn loss_db_fl(
    variant: DbVariant,
    policy: &dyn EpsModel,
    pretrained: Option<&dyn EpsModel>,
    scalar_flow: &dyn Fn(&[f64], usize) -> f64,
    tr: &Transition,
    schedule: &NoiseSchedule,
    reward: &Arc<RewardSpec>,
    weights: &LossWeights,
) -> Result<f64> {
    let fl = FlContext {
        schedule,
        reward,
        weights,
    };
    with_policy(policy, |tape, eps| {
        let mut flow = flow_fn(|x, s| tape.scalar(scalar_flow(&x.value(), s)));
        let l = loss_db_fl_on(
            variant,
            policy,
            eps,
            pretrained,
            &mut flow,
            tape.var_from(&tr.x_t),
            tape.var_from(&tr.x_next),
            tr.t,
            &fl,
        )?;
        Ok(l.item())
    })
}

// ---------------------------------------------------------------------------
// Total loss.

/// Networks and references entering the finetuning loss.
pub struct FinetuneModels<'a> {
    pub policy: &'a dyn EpsModel,
    /// `None` trains the plain (non-residual) objective from scratch.
    pub pretrained: Option<&'a dyn EpsModel>,
    pub g_phi: &'a Mlp,
    /// `theta_dagger`, the parameters of the previous update.
    pub prev_policy: &'a dyn EpsModel,
    pub correction: Option<&'a Mlp>,
    /// Policy used for the parameter-constant forward-looking term in
    /// first-order mode; `None` means `policy`.
    pub frozen_fl: Option<&'a dyn EpsModel>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub fwd: f64,
    pub rev: f64,
    pub terminal: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrads {
    pub loss: LossBreakdown,
    pub grad_theta: Vec<f64>,
    pub grad_phi: Vec<f64>,
    pub grad_psi: Option<Vec<f64>>,
}

/// Check that a weighted selection is well formed and contains `T - 1`.
pub fn check_selection(selection: &[(usize, f64)], steps: usize) -> Result<()> {
    if !selection.iter().any(|(t, _)| *t == steps - 1) {
        return Err(Error::Precondition(format!(
            "transition selection must contain the final index {}",
            steps - 1
        )));
    }
    if let Some((t, _)) = selection.iter().find(|(t, _)| *t >= steps) {
        return Err(Error::Precondition(format!("transition index {t} out of range")));
    }
    Ok(())
}

/// Weighted FL gradient-DB loss of one trajectory (residual when a
/// pretrained policy is given) with exact gradients for
/// `theta`, `phi` (and `psi` when the correction is enabled).
///
/// Each selected transition contributes `w_f L_fwd + w_b L_rev` and, when
/// `lambda_reg > 0`, `lambda |eps_theta(x_t) - eps_dagger(x_t)|^2`, all scaled
/// by its inclusion weight. The terminal loss `|g(x_T)|^2` is added once.
pub fn total_finetune_loss(
    models: &FinetuneModels<'_>,
    traj: &Trajectory,
    selection: &[(usize, f64)],
    fl: &FlContext<'_>,
    rng: &mut Rng,
) -> Result<LossAndGrads> {
    let schedule = fl.schedule;
    let steps = schedule.steps();
    check_selection(selection, steps)?;
    let w = fl.weights;
    let tape = Tape::new();
    let eps = models.policy.bind_eps(&tape);
    let g = models.g_phi.bind(&tape);
    let h = match (w.use_correction, models.correction) {
        (true, Some(h)) => Some(h.bind(&tape)),
        (true, None) => return Err(Error::Config("correction enabled without a correction network".into())),
        _ => None,
    };
    if h.is_some() && models.pretrained.is_none() {
        return Err(Error::Config("the correction term needs a pretrained policy".into()));
    }

    let mut parts = LossBreakdown::default();
    let mut total = tape.scalar(0.0);
    for &(t, weight) in selection {
        let x_t = tape.var_from(&traj.states[t]);
        let x_next = tape.var_from(&traj.states[t + 1]);
        let fl_policy = models.frozen_fl.unwrap_or(models.policy);
        let mut flow = flow_fn(|x, s| fl.flow_score_on(fl_policy, eps.as_ref(), Some(&g), x, s, rng));
        for (dir, wd) in [(Direction::Forward, w.w_f), (Direction::Reverse, w.w_b)] {
            if wd == 0.0 {
                continue;
            }
            let l = match (models.pretrained, &h) {
                (Some(pre), Some(h)) => {
                    corrected_residual_loss_on(dir, eps.as_ref(), pre, &mut flow, h, x_t, x_next, t, schedule, w.eta)
                }
                (Some(pre), None) => loss_res_grad_db_on(dir, eps.as_ref(), pre, &mut flow, x_t, x_next, t, schedule, w.eta),
                (None, _) => loss_grad_db_on(dir, eps.as_ref(), &mut flow, x_t, x_next, t, schedule),
            };
            let v = weight * wd * l.item();
            match dir {
                Direction::Forward => parts.fwd += v,
                Direction::Reverse => parts.rev += v,
            }
            total = total + l.scale(weight * wd);
        }
        if w.lambda_reg > 0.0 {
            let r = output_regularization_on(eps.as_ref(), models.prev_policy, x_t, t);
            parts.reg += weight * w.lambda_reg * r.item();
            total = total + r.scale(weight * w.lambda_reg);
        }
    }
    let term = loss_terminal_fl_on(&g, tape.var_from(traj.terminal()), steps);
    parts.terminal = term.item();
    total = total + term;
    parts.total = total.item();
    if !parts.total.is_finite() {
        return Err(Error::Numerical {
            step: steps,
            what: format!("non-finite finetuning loss {}", parts.total),
        });
    }

    let mut wrt = eps.params();
    let n_theta = wrt.len();
    let gp = g.params();
    let n_phi = gp.len();
    wrt.extend(gp);
    if let Some(h) = &h {
        wrt.extend(h.params());
    }
    let grads = tape.grad(total, &wrt);
    let flat = |gs: &[Var<'_>]| gs.iter().flat_map(|v| v.value()).collect::<Vec<f64>>();
    Ok(LossAndGrads {
        loss: parts,
        grad_theta: flat(&grads[..n_theta]),
        grad_phi: flat(&grads[n_theta..n_theta + n_phi]),
        grad_psi: h.as_ref().map(|_| flat(&grads[n_theta + n_phi..])),
    })
}

/// Networks entering the scalar-flow DB losses.
pub struct DbModels<'a> {
    pub policy: &'a dyn EpsModel,
    /// `None` selects the plain DB loss, `Some` the residual one.
    pub pretrained: Option<&'a dyn EpsModel>,
    /// Scalar log-flow correction `f(x, t)`; `f(., T)` is pinned to zero.
    pub scalar_flow: &'a Mlp,
    pub prev_policy: &'a dyn EpsModel,
}

/// Weighted scalar DB-FL loss of one trajectory. The DB terms are reported
/// under `fwd`; `grad_phi` holds the scalar-flow gradient.
pub fn total_db_fl_loss(
    models: &DbModels<'_>,
    traj: &Trajectory,
    selection: &[(usize, f64)],
    fl: &FlContext<'_>,
) -> Result<LossAndGrads> {
    let schedule = fl.schedule;
    let steps = schedule.steps();
    check_selection(selection, steps)?;
    let w = fl.weights;
    let variant = match models.pretrained {
        Some(_) => DbVariant::Residual,
        None => DbVariant::Plain,
    };
    let tape = Tape::new();
    let eps = models.policy.bind_eps(&tape);
    let f = models.scalar_flow.bind(&tape);
    let mut parts = LossBreakdown::default();
    let mut total = tape.scalar(0.0);
    for &(t, weight) in selection {
        let x_t = tape.var_from(&traj.states[t]);
        let x_next = tape.var_from(&traj.states[t + 1]);
        let mut flow = flow_fn(|x, s| if s == steps { tape.scalar(0.0) } else { f.forward(x, s) });
        let l = loss_db_fl_on(variant, models.policy, eps.as_ref(), models.pretrained, &mut flow, x_t, x_next, t, fl)?;
        parts.fwd += weight * l.item();
        total = total + l.scale(weight);
        if w.lambda_reg > 0.0 {
            let r = output_regularization_on(eps.as_ref(), models.prev_policy, x_t, t);
            parts.reg += weight * w.lambda_reg * r.item();
            total = total + r.scale(weight * w.lambda_reg);
        }
    }
    parts.total = total.item();
    if !parts.total.is_finite() {
        return Err(Error::Numerical {
            step: steps,
            what: format!("non-finite DB loss {}", parts.total),
        });
    }
    let mut wrt = eps.params();
    let n_theta = wrt.len();
    wrt.extend(f.params());
    let grads = tape.grad(total, &wrt);
    Ok(LossAndGrads {
        loss: parts,
        grad_theta: flatten_grads(&grads[..n_theta]),
        grad_phi: flatten_grads(&grads[n_theta..]),
        grad_psi: None,
    })
}

// ---------------------------------------------------------------------------
// Identities.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherGap {
    /// Mean of `1/2 |score_F - score of P_B F(x') / F(x)|^2`.
    pub lhs: f64,
    /// Mean of `1/2 L_gradDB`.
    pub rhs: f64,
    /// Largest per-sample gap between the two integrands.
    pub max_gap: f64,
}

/// Fisher divergence between `P_F(. | x_t)` and `P_B(x_t | .) F(.) / F(x_t)`
/// against half the expected forward `grad-DB` loss, on shared samples.
///
/// The left integrand is formed from tape-differentiated log-densities, the
/// right one from the analytic scores, so agreement is a real check.
#[allow(clippy::too_many_arguments)]
pub fn fisher_divergence_gap(
    policy: &dyn EpsModel,
    flow_score: &dyn Fn(&[f64], usize) -> Vec<f64>,
    x_t: &[f64],
    t: usize,
    n_samples: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<FisherGap> {
    if n_samples == 0 {
        return Err(Error::Empty("fisher samples"));
    }
    let mu = policy_mean(policy, x_t, t, schedule);
    let sigma = schedule.sigma(t);
    let r = schedule.backward_ratio(t);
    let sb = (1.0 - r * r).sqrt();
    let (mut lhs, mut rhs, mut gap) = (0.0, 0.0, 0.0_f64);
    for _ in 0..n_samples {
        let z = rng::normal_vec(rng, x_t.len());
        let x_next: Vec<f64> = mu.iter().zip(&z).map(|(m, e)| m + sigma * e).collect();
        let tape = Tape::new();
        let xn = tape.var_from(&x_next);
        let log_pf = log_normal_on(xn, tape.var_from(&mu), sigma);
        let log_pb = log_normal_on(tape.var_from(x_t), xn.scale(r), sb);
        let s = tape.grad(log_pf - log_pb, &[xn])[0].value();
        let f = flow_score(&x_next, t + 1);
        let a = 0.5 * s.iter().zip(&f).map(|(si, fi)| (si - fi).powi(2)).sum::<f64>();
        let tr = Transition {
            x_t: x_t.to_vec(),
            x_next,
            t,
        };
        let b = 0.5 * loss_grad_db(Direction::Forward, policy, flow_score, &tr, schedule);
        lhs += a;
        rhs += b;
        gap = gap.max((a - b).abs());
    }
    Ok(FisherGap {
        lhs: lhs / n_samples as f64,
        rhs: rhs / n_samples as f64,
        max_gap: gap,
    })
}

/// `log P_F~(x_{t+1} | x_t) = log P_F - log P_F#`.
pub fn residual_log_prob(policy: &dyn EpsModel, pretrained: &dyn EpsModel, tr: &Transition, schedule: &NoiseSchedule) -> f64 {
    let s2 = schedule.sigma(tr.t).powi(2);
    let a = sub(&tr.x_next, &policy_mean(policy, &tr.x_t, tr.t, schedule));
    let b = sub(&tr.x_next, &policy_mean(pretrained, &tr.x_t, tr.t, schedule));
    let q = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    (q(&b) - q(&a)) / (2.0 * s2)
}

/// `|sum_t log P_F~ + log Z~ - beta log R(x_T)|` with `log Z~ = flow(x_0, 0)`.
pub fn relative_tb_residual(
    policy: &dyn EpsModel,
    pretrained: &dyn EpsModel,
    scalar_residual_flow: &dyn Fn(&[f64], usize) -> f64,
    traj: &Trajectory,
    reward: &RewardSpec,
    beta: f64,
    schedule: &NoiseSchedule,
) -> f64 {
    let sum: f64 = (0..traj.steps())
        .map(|t| residual_log_prob(policy, pretrained, &traj.transition(t), schedule))
        .sum();
    (sum + scalar_residual_flow(&traj.states[0], 0) - beta * reward.log_reward(traj.terminal())).abs()
}

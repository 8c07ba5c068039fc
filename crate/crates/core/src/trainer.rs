//! Pretraining by denoising and the finetuning loop.
//!
//! Finetuning follows the two-buffer scheme: each epoch samples a fresh
//! batch with the current policy while the updates are computed on the
//! batch sampled in the previous epoch (`on_policy` trains on the fresh
//! batch instead). Trajectories are processed in groups of
//! `update_every_n_traj`; each group yields one optimizer step on the mean
//! gradient, split into `grad_accum_steps` equal micro-batches.
//!
//! `theta_dagger` is the policy before the most recent update: it is set
//! from `theta` right before each optimizer step, so at every loss
//! evaluation it holds the parameters of the preceding step.

use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;

use crate::baselines::{self, BaselineConfig};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::eval::{self, GridOracle, MetricsRecord};
use crate::nets::{EpsModel, Mlp, MlpSpec};
use crate::objectives::{
    total_db_fl_loss, total_finetune_loss, DbModels, FinetuneModels, FlAnchor, FlContext, LossAndGrads, LossBreakdown,
    LossWeights,
};
use crate::optim::{Adam, AdamConfig};
use crate::rewards::RewardSpec;
use crate::rng::{self, derive_seed, stream};
use crate::schedule::{sample_terminals, sample_trajectories, NoiseSchedule, Trajectory};

// ---------------------------------------------------------------------------
// Pretraining.

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Cosine decay of the learning rate down to this fraction.
    pub lr_floor: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 128,
            adam: AdamConfig::default(),
            lr_floor: 0.1,
            seed: 0,
        }
    }
}

/// Denoising loss `E |eps_theta(x_t, t) - eps|^2` with `t` uniform over the
/// policy steps; returns the trained network and the per-step losses.
pub fn pretrain_from(
    init: Mlp,
    data: &DatasetSpec,
    schedule: &NoiseSchedule,
    config: &PretrainConfig,
) -> Result<(Mlp, Vec<f64>)> {
    if config.batch == 0 {
        return Err(Error::Config("pretrain batch must be positive".into()));
    }
    let steps = schedule.steps();
    let mut net = init;
    let mut opt = Adam::new(net.num_params(), config.adam.clone());
    let mut history = Vec::with_capacity(config.steps);
    let lr0 = config.adam.lr;
    for step in 0..config.steps {
        let mut rng = rng::rng_from(config.seed, &[stream::PRETRAIN, step as u64]);
        let mut grad = vec![0.0; net.num_params()];
        let mut loss = 0.0;
        let scale = 1.0 / config.batch as f64;
        for _ in 0..config.batch {
            let x0 = data.sample(&mut rng);
            let t = rng.random_range(0..steps);
            let ab = schedule.alpha_bar_at(t);
            let noise = rng::normal_vec(&mut rng, x0.len());
            let xt: Vec<f64> = x0.iter().zip(&noise).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect();
            let out = net.eval(&xt, t);
            let diff: Vec<f64> = out.iter().zip(&noise).map(|(a, b)| a - b).collect();
            loss += scale * diff.iter().map(|v| v * v).sum::<f64>();
            let cot: Vec<f64> = diff.iter().map(|v| 2.0 * scale * v).collect();
            net.param_vjp(&xt, t, &cot, &mut grad);
        }
        if !(loss < 1e6) {
            return Err(Error::Numerical {
                step,
                what: format!("pretraining diverged (loss {loss})"),
            });
        }
        history.push(loss);
        let progress = step as f64 / config.steps.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.config.lr = lr0 * (config.lr_floor + (1.0 - config.lr_floor) * cosine);
        let mut flat = net.to_flat();
        opt.update(&mut flat, &grad)?;
        net.set_flat(&flat)?;
    }
    Ok((net, history))
}

/// Pretrain a freshly initialized policy network.
pub fn pretrain(
    data: &DatasetSpec,
    schedule: &NoiseSchedule,
    spec: &MlpSpec,
    config: &PretrainConfig,
) -> Result<(Mlp, Vec<f64>)> {
    let init = Mlp::new(spec, &mut rng::rng_from(config.seed, &[stream::INIT]));
    pretrain_from(init, data, schedule, config)
}

// ---------------------------------------------------------------------------
// Transition subsampling.

/// Stratified subsample of transition indices with inclusion weights.
///
/// `{0, ..., T-2}` is split into `ceil(fraction T) - 1` near-equal intervals,
/// one index is drawn uniformly from each and weighted by the interval
/// length; `T - 1` is always included with weight 1.
pub fn subsample_transitions(steps: usize, fraction: f64, rng: &mut rng::Rng) -> Result<Vec<(usize, f64)>> {
    let expected = fraction * steps as f64;
    if !(fraction > 0.0 && fraction <= 1.0) || expected < 1.0 - 1e-9 {
        return Err(Error::Config(format!(
            "subsample fraction {fraction} selects fewer than one of {steps} transitions"
        )));
    }
    let n = ((expected - 1e-9).ceil() as usize).clamp(1, steps);
    let len = steps - 1;
    let m = (n - 1).min(len);
    let mut out = Vec::with_capacity(m + 1);
    for i in 0..m {
        let (lo, hi) = (i * len / m, (i + 1) * len / m);
        out.push((rng.random_range(lo..hi), (hi - lo) as f64));
    }
    out.push((steps - 1, 1.0));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Finetuning.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Residual gradient-DB with the forward-looking flow score.
    ResGradDb,
    /// Plain gradient-DB: samples proportional to `R^beta` alone.
    GradDb,
    /// Plain scalar DB with a forward-looking log-flow.
    DagDb,
    /// Residual scalar DB with a forward-looking log-flow.
    ResDb,
    Ddpo,
    Refl,
    DraftK,
    DraftLv,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::ResGradDb,
        Method::GradDb,
        Method::DagDb,
        Method::ResDb,
        Method::Ddpo,
        Method::Refl,
        Method::DraftK,
        Method::DraftLv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ResGradDb => "res_grad_db",
            Method::GradDb => "grad_db",
            Method::DagDb => "dag_db",
            Method::ResDb => "res_db",
            Method::Ddpo => "ddpo",
            Method::Refl => "refl",
            Method::DraftK => "draft_k",
            Method::DraftLv => "draft_lv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }

    /// Uses the vector flow-score network `g_phi`.
    pub fn uses_flow_score(self) -> bool {
        matches!(self, Method::ResGradDb | Method::GradDb)
    }

    /// Uses the scalar log-flow network.
    pub fn uses_scalar_flow(self) -> bool {
        matches!(self, Method::DagDb | Method::ResDb)
    }

    fn residual(self) -> bool {
        matches!(self, Method::ResGradDb | Method::ResDb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub method: Method,
    pub weights: LossWeights,
    pub baseline: BaselineConfig,
    pub n_traj_per_epoch: usize,
    pub grad_accum_steps: usize,
    pub update_every_n_traj: usize,
    pub subsample_fraction: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate every this many epochs (and after the last one).
    pub eval_every: usize,
    pub on_policy: bool,
    pub adam: AdamConfig,
    /// Hidden widths of the flow network (vector or scalar head).
    pub flow_hidden: Vec<usize>,
    pub correction_hidden: Vec<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            method: Method::ResGradDb,
            weights: LossWeights::default(),
            baseline: BaselineConfig::default(),
            n_traj_per_epoch: 64,
            grad_accum_steps: 4,
            update_every_n_traj: 32,
            subsample_fraction: 0.1,
            epochs: 100,
            seed: 0,
            eval_every: 10,
            on_policy: false,
            adam: AdamConfig::default(),
            flow_hidden: vec![64, 64, 64],
            correction_hidden: vec![32, 32],
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        self.weights.validate()?;
        self.baseline.validate(steps)?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.n_traj_per_epoch >= self.update_every_n_traj && self.update_every_n_traj >= 1) {
            return bad("need n_traj_per_epoch >= update_every_n_traj >= 1".into());
        }
        if self.grad_accum_steps == 0 || self.update_every_n_traj % self.grad_accum_steps != 0 {
            return bad("grad_accum_steps must divide update_every_n_traj".into());
        }
        if self.n_traj_per_epoch % self.update_every_n_traj != 0 {
            return bad("update_every_n_traj must divide n_traj_per_epoch".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.weights.use_correction && !self.method.uses_flow_score() {
            return bad("the correction term applies to gradient-DB methods only".into());
        }
        if self.weights.use_correction && !self.method.residual() {
            return bad("the correction term needs the residual objective".into());
        }
        let mut probe = rng::rng_from(0, &[]);
        subsample_transitions(steps, self.subsample_fraction, &mut probe).map(|_| ())
    }

    fn flow_spec(&self, d: usize, steps: usize) -> MlpSpec {
        let base = if self.method.uses_scalar_flow() {
            MlpSpec::scalar_flow(d, steps)
        } else {
            MlpSpec::flow_score(d, steps)
        };
        base.with_hidden(self.flow_hidden.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Terminal samples for reward, diversity and TV.
    pub n_samples: usize,
    /// Samples per side for the energy distance.
    pub n_prior: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 4096,
            n_prior: 1024,
        }
    }
}

/// Fixed problem data shared by every epoch of a run.
pub struct FinetuneContext {
    pub schedule: NoiseSchedule,
    pub reward: Arc<RewardSpec>,
    pub oracle: Option<GridOracle>,
    pub eval: EvalConfig,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub policy: Mlp,
    pub pretrained: Mlp,
    /// `g_phi` for gradient-DB methods, the scalar log-flow for DB methods,
    /// unused otherwise.
    pub flow: Mlp,
    pub correction: Option<Mlp>,
    pub dagger: Mlp,
    /// Policy that sampled `prev`.
    pub behavior: Mlp,
    pub opt_theta: Adam,
    pub opt_phi: Adam,
    pub opt_psi: Option<Adam>,
    pub prev: Vec<Trajectory>,
    pub epoch: usize,
    pub updates: usize,
}

fn epoch_seeds(config: &FinetuneConfig, epoch: usize) -> Vec<u64> {
    (0..config.n_traj_per_epoch)
        .map(|i| derive_seed(config.seed, &[stream::SAMPLE, epoch as u64, i as u64]))
        .collect()
}

/// Sample one epoch's batch; chunks run in parallel, results are
/// independent of the thread count.
pub fn sample_epoch(policy: &Mlp, schedule: &NoiseSchedule, config: &FinetuneConfig, epoch: usize) -> Result<Vec<Trajectory>> {
    let seeds = epoch_seeds(config, epoch);
    let d = policy.output_dim();
    let chunks: Vec<Result<Vec<Trajectory>>> =
        seeds.par_chunks(16).map(|c| sample_trajectories(policy, schedule, d, c)).collect();
    let mut out = Vec::with_capacity(seeds.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

impl FinetuneState {
    /// Initial state: `theta = theta#`, fresh flow networks, and the first
    /// buffer sampled with the initial policy.
    pub fn new(pretrained: Mlp, config: &FinetuneConfig, schedule: &NoiseSchedule) -> Result<Self> {
        config.validate(schedule.steps())?;
        let d = pretrained.output_dim();
        let steps = schedule.steps();
        let mut init = rng::rng_from(config.seed, &[stream::INIT]);
        let flow = Mlp::new(&config.flow_spec(d, steps), &mut init);
        let correction = config
            .weights
            .use_correction
            .then(|| Mlp::new(&MlpSpec::correction(d, steps).with_hidden(config.correction_hidden.clone()), &mut init));
        let prev = if config.on_policy {
            Vec::new()
        } else {
            sample_epoch(&pretrained, schedule, config, 0)?
        };
        Ok(Self {
            opt_theta: Adam::new(pretrained.num_params(), config.adam.clone()),
            opt_phi: Adam::new(flow.num_params(), config.adam.clone()),
            opt_psi: correction.as_ref().map(|c| Adam::new(c.num_params(), config.adam.clone())),
            policy: pretrained.clone(),
            dagger: pretrained.clone(),
            behavior: pretrained.clone(),
            pretrained,
            flow,
            correction,
            prev,
            epoch: 0,
            updates: 0,
        })
    }
}

/// Mean losses over an epoch and the size of the last update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochStats {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub updates: usize,
}

fn add_into(acc: &mut [f64], g: &[f64], k: f64) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += k * b);
}

fn add_loss(acc: &mut LossBreakdown, l: &LossBreakdown, k: f64) {
    acc.total += k * l.total;
    acc.fwd += k * l.fwd;
    acc.rev += k * l.rev;
    acc.terminal += k * l.terminal;
    acc.reg += k * l.reg;
}

/// Loss and gradients of one trajectory for the per-trajectory methods.
fn trajectory_loss(
    state: &FinetuneState,
    config: &FinetuneConfig,
    ctx: &FinetuneContext,
    traj: &Trajectory,
    epoch: usize,
    index: usize,
) -> Result<LossAndGrads> {
    let schedule = &ctx.schedule;
    let steps = schedule.steps();
    let key = [epoch as u64, index as u64];
    let mut sub_rng = rng::rng_from(config.seed, &[stream::SUBSAMPLE, key[0], key[1]]);
    let selection = subsample_transitions(steps, config.subsample_fraction, &mut sub_rng)?;
    let mut rng = rng::rng_from(config.seed, &[stream::SMOOTH, key[0], key[1]]);
    let fl = FlContext {
        schedule,
        reward: &ctx.reward,
        weights: &config.weights,
    };
    let pretrained: Option<&dyn EpsModel> = config.method.residual().then_some(&state.pretrained as &dyn EpsModel);
    let baseline = |lg: baselines::LossGrad| LossAndGrads {
        loss: LossBreakdown {
            total: lg.loss,
            fwd: lg.loss,
            ..Default::default()
        },
        grad_theta: lg.grad,
        grad_phi: vec![0.0; state.flow.num_params()],
        grad_psi: None,
    };
    match config.method {
        Method::ResGradDb | Method::GradDb => {
            let models = FinetuneModels {
                policy: &state.policy,
                pretrained,
                g_phi: &state.flow,
                prev_policy: &state.dagger,
                correction: state.correction.as_ref(),
                frozen_fl: match config.weights.fl_anchor {
                    FlAnchor::Policy => None,
                    FlAnchor::Pretrained => Some(&state.pretrained),
                },
            };
            total_finetune_loss(&models, traj, &selection, &fl, &mut rng)
        }
        Method::DagDb | Method::ResDb => {
            let models = DbModels {
                policy: &state.policy,
                pretrained,
                scalar_flow: &state.flow,
                prev_policy: &state.dagger,
            };
            total_db_fl_loss(&models, traj, &selection, &fl)
        }
        Method::Refl => {
            baselines::refl_loss(&state.policy, traj, &ctx.reward, &config.baseline, schedule, &mut rng).map(baseline)
        }
        Method::DraftK | Method::DraftLv => baselines::draft_loss(
            &state.policy,
            traj,
            &ctx.reward,
            &config.baseline,
            config.method == Method::DraftLv,
            schedule,
            &mut rng,
        )
        .map(baseline),
        Method::Ddpo => unreachable!("ddpo is a batch loss"),
    }
}

/// Mean loss and gradients of one micro-batch.
fn micro_batch(
    state: &FinetuneState,
    behavior: &Mlp,
    config: &FinetuneConfig,
    ctx: &FinetuneContext,
    batch: &[Trajectory],
    epoch: usize,
    first_index: usize,
) -> Result<LossAndGrads> {
    let n_theta = state.policy.num_params();
    let n_phi = state.flow.num_params();
    if config.method == Method::Ddpo {
        let mut rng = rng::rng_from(config.seed, &[stream::SUBSAMPLE, epoch as u64, first_index as u64]);
        let selection = subsample_transitions(ctx.schedule.steps(), config.subsample_fraction, &mut rng)?;
        let lg = baselines::ddpo_loss(&state.policy, behavior, batch, &selection, &ctx.reward, &config.baseline, &ctx.schedule)?;
        return Ok(LossAndGrads {
            loss: LossBreakdown {
                total: lg.loss,
                fwd: lg.loss,
                ..Default::default()
            },
            grad_theta: lg.grad,
            grad_phi: vec![0.0; n_phi],
            grad_psi: None,
        });
    }
    let results: Vec<Result<LossAndGrads>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, tr)| trajectory_loss(state, config, ctx, tr, epoch, first_index + i))
        .collect();
    let k = 1.0 / batch.len() as f64;
    let mut out = LossAndGrads {
        loss: LossBreakdown::default(),
        grad_theta: vec![0.0; n_theta],
        grad_phi: vec![0.0; n_phi],
        grad_psi: state.correction.as_ref().map(|c| vec![0.0; c.num_params()]),
    };
    for r in results {
        let r = r?;
        add_loss(&mut out.loss, &r.loss, k);
        add_into(&mut out.grad_theta, &r.grad_theta, k);
        add_into(&mut out.grad_phi, &r.grad_phi, k);
        if let (Some(acc), Some(g)) = (out.grad_psi.as_mut(), r.grad_psi.as_ref()) {
            add_into(acc, g, k);
        }
    }
    Ok(out)
}

fn apply(net: &mut Mlp, opt: &mut Adam, grad: &[f64]) -> Result<()> {
    let mut flat = net.to_flat();
    opt.update(&mut flat, grad)?;
    net.set_flat(&flat)
}

/// One epoch: sample the next buffer, update on the training buffer, swap.
pub fn finetune_epoch(state: &mut FinetuneState, config: &FinetuneConfig, ctx: &FinetuneContext) -> Result<EpochStats> {
    let epoch = state.epoch + 1;
    let sampler = state.policy.clone();
    let curr = sample_epoch(&sampler, &ctx.schedule, config, epoch)?;
    let (data, behavior) = if config.on_policy {
        (curr.clone(), sampler.clone())
    } else {
        if state.prev.is_empty() {
            return Err(Error::Precondition("the previous trajectory buffer is empty".into()));
        }
        (std::mem::take(&mut state.prev), state.behavior.clone())
    };

    let mut stats = EpochStats::default();
    let micro = config.update_every_n_traj / config.grad_accum_steps;
    let n_groups = data.len() / config.update_every_n_traj;
    for (g, group) in data.chunks(config.update_every_n_traj).enumerate() {
        let mut acc: Option<LossAndGrads> = None;
        let k = 1.0 / config.grad_accum_steps as f64;
        for (m, batch) in group.chunks(micro).enumerate() {
            let first = g * config.update_every_n_traj + m * micro;
            let r = micro_batch(state, &behavior, config, ctx, batch, epoch, first)?;
            match acc.as_mut() {
                None => {
                    let mut r = r;
                    r.grad_theta.iter_mut().for_each(|v| *v *= k);
                    r.grad_phi.iter_mut().for_each(|v| *v *= k);
                    if let Some(p) = r.grad_psi.as_mut() {
                        p.iter_mut().for_each(|v| *v *= k);
                    }
                    let mut l = LossBreakdown::default();
                    add_loss(&mut l, &r.loss, k);
                    r.loss = l;
                    acc = Some(r);
                }
                Some(a) => {
                    add_loss(&mut a.loss, &r.loss, k);
                    add_into(&mut a.grad_theta, &r.grad_theta, k);
                    add_into(&mut a.grad_phi, &r.grad_phi, k);
                    if let (Some(p), Some(q)) = (a.grad_psi.as_mut(), r.grad_psi.as_ref()) {
                        add_into(p, q, k);
                    }
                }
            }
        }
        let acc = acc.expect("groups are non-empty");
        add_loss(&mut stats.loss, &acc.loss, 1.0 / n_groups as f64);
        stats.grad_norm = acc.grad_theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        state.dagger = state.policy.clone();
        apply(&mut state.policy, &mut state.opt_theta, &acc.grad_theta)?;
        if config.method.uses_flow_score() || config.method.uses_scalar_flow() {
            apply(&mut state.flow, &mut state.opt_phi, &acc.grad_phi)?;
        }
        if let (Some(h), Some(opt), Some(gp)) = (state.correction.as_mut(), state.opt_psi.as_mut(), acc.grad_psi.as_ref()) {
            apply(h, opt, gp)?;
        }
        state.updates += 1;
        stats.updates += 1;
    }
    if !config.on_policy {
        state.prev = curr;
        state.behavior = sampler;
    }
    state.epoch = epoch;
    Ok(stats)
}

/// Samples from the pretrained model used as the prior-distance reference.
pub fn prior_samples(state: &FinetuneState, config: &FinetuneConfig, ctx: &FinetuneContext) -> Result<Vec<Vec<f64>>> {
    let d = state.pretrained.output_dim();
    sample_terminals(&state.pretrained, &ctx.schedule, d, ctx.eval.n_prior, derive_seed(config.seed, &[stream::PRIOR]))
}

/// Evaluate the current policy on a fixed sample stream.
pub fn evaluate(
    state: &FinetuneState,
    config: &FinetuneConfig,
    ctx: &FinetuneContext,
    prior: &[Vec<f64>],
    loss: &LossBreakdown,
) -> Result<MetricsRecord> {
    let d = state.policy.output_dim();
    let steps = ctx.schedule.steps();
    let samples = sample_terminals(&state.policy, &ctx.schedule, d, ctx.eval.n_samples, derive_seed(config.seed, &[stream::EVAL]))?;
    let n_prior = ctx.eval.n_prior.min(samples.len());
    let terminal_g_norm = if config.method.uses_flow_score() {
        samples
            .iter()
            .map(|x| state.flow.eval(x, steps).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / samples.len() as f64
    } else {
        0.0
    };
    Ok(MetricsRecord {
        step: state.updates,
        mean_reward: eval::mean_reward(&samples, &ctx.reward)?,
        diversity: eval::diversity(&samples)?,
        prior_distance: eval::prior_distance(&samples[..n_prior], prior)?,
        target_tv: match &ctx.oracle {
            Some(o) => eval::target_tv(&samples, o)?,
            None => f64::NAN,
        },
        terminal_g_norm,
        loss_fwd: loss.fwd,
        loss_rev: loss.rev,
        loss_terminal: loss.terminal,
        loss_reg: loss.reg,
    })
}

/// Run epochs until `config.epochs`, evaluating at the start of a fresh run,
/// every `eval_every` epochs and after the last epoch. `on_eval` sees the
/// state and all records after each evaluation (for checkpointing).
pub fn run_finetune(
    state: &mut FinetuneState,
    config: &FinetuneConfig,
    ctx: &FinetuneContext,
    records: &mut Vec<MetricsRecord>,
    mut on_eval: impl FnMut(&FinetuneState, &[MetricsRecord]) -> Result<()>,
) -> Result<()> {
    let prior = prior_samples(state, config, ctx)?;
    if state.epoch == 0 && records.is_empty() {
        records.push(evaluate(state, config, ctx, &prior, &LossBreakdown::default())?);
        on_eval(state, records)?;
    }
    while state.epoch < config.epochs {
        let stats = finetune_epoch(state, config, ctx)?;
        if state.epoch % config.eval_every == 0 || state.epoch == config.epochs {
            records.push(evaluate(state, config, ctx, &prior, &stats.loss)?);
            on_eval(state, records)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Gamma;
    use crate::rewards::RewardSpec;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(10, 0.02, 0.4).unwrap()
    }

    fn small_policy(d: usize, steps: usize, seed: u64) -> Mlp {
        Mlp::new(&MlpSpec::policy(d, steps).with_hidden(vec![8, 8]), &mut rng::rng_from(seed, &[]))
    }

    fn small_config(method: Method) -> FinetuneConfig {
        FinetuneConfig {
            method,
            n_traj_per_epoch: 8,
            update_every_n_traj: 4,
            grad_accum_steps: 2,
            subsample_fraction: 0.3,
            epochs: 2,
            eval_every: 1,
            flow_hidden: vec![8],
            correction_hidden: vec![4],
            ..Default::default()
        }
    }

    fn ctx(d: usize) -> FinetuneContext {
        FinetuneContext {
            schedule: sched(),
            reward: Arc::new(RewardSpec::gmm(vec![vec![1.0; d]], vec![1.0], 0.8).unwrap()),
            oracle: None,
            eval: EvalConfig {
                n_samples: 128,
                n_prior: 64,
            },
        }
    }

    #[test]
    fn subsample_rules() {
        let mut rng = rng::rng_from(1, &[]);
        let all = subsample_transitions(20, 1.0, &mut rng).unwrap();
        assert_eq!(all, (0..20).map(|t| (t, 1.0)).collect::<Vec<_>>());
        for _ in 0..100 {
            let s = subsample_transitions(20, 0.1, &mut rng).unwrap();
            assert_eq!(s.len(), 2);
            assert!(s[0].0 < 19 && s[0].1 == 19.0);
            assert_eq!(s[1], (19, 1.0));
        }
        let s = subsample_transitions(20, 0.3, &mut rng).unwrap();
        assert_eq!(s.iter().map(|(_, w)| w).sum::<f64>(), 20.0);
        assert!(subsample_transitions(20, 0.01, &mut rng).is_err());
        assert_eq!(subsample_transitions(20, 0.05, &mut rng).unwrap(), vec![(19, 1.0)]);
    }

    #[test]
    fn subsampled_sum_is_unbiased() {
        let values: Vec<f64> = (0..20).map(|t| ((t as f64) * 0.7).sin().powi(2) + 0.1 * t as f64).collect();
        let full: f64 = values.iter().sum();
        let mut rng = rng::rng_from(2, &[]);
        let n = 20_000;
        let mean = (0..n)
            .map(|_| {
                subsample_transitions(20, 0.1, &mut rng).unwrap().iter().map(|(t, w)| w * values[*t]).sum::<f64>()
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - full).abs() < 0.01 * full, "{mean} vs {full}");
    }

    #[test]
    fn pretrain_zero_steps_is_identity() {
        let spec = MlpSpec::policy(1, 10).with_hidden(vec![8]);
        let cfg = PretrainConfig {
            steps: 0,
            ..Default::default()
        };
        let (net, hist) = pretrain(&DatasetSpec::standard_normal(1), &sched(), &spec, &cfg).unwrap();
        let init = Mlp::new(&spec, &mut rng::rng_from(0, &[stream::INIT]));
        assert_eq!(net, init);
        assert!(hist.is_empty());
    }

    #[test]
    fn pretrain_point_mass_recovers_the_origin() {
        let data = DatasetSpec::new(vec![vec![0.0]], vec![1.0], 0.0).unwrap();
        let spec = MlpSpec::policy(1, 10).with_hidden(vec![16, 16]);
        let cfg = PretrainConfig {
            steps: 1500,
            batch: 64,
            adam: AdamConfig { lr: 3e-3, ..Default::default() },
            ..Default::default()
        };
        let (net, hist) = pretrain(&data, &sched(), &spec, &cfg).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        let xs = sample_terminals(&net, &sched(), 1, 4000, 7).unwrap();
        let mean = xs.iter().map(|x| x[0]).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.05, "{mean}");
    }

    #[test]
    fn methods_round_trip_names() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("ppo").is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_theta_and_swaps_buffers() {
        let c = ctx(2);
        let mut cfg = small_config(Method::ResGradDb);
        cfg.adam.lr = 0.0;
        let mut st = FinetuneState::new(small_policy(2, 10, 1), &cfg, &c.schedule).unwrap();
        let first = st.prev.clone();
        let theta = st.policy.clone();
        finetune_epoch(&mut st, &cfg, &c).unwrap();
        assert_eq!(st.policy, theta);
        assert_ne!(st.prev[0].states, first[0].states);
        assert_eq!(st.prev, sample_epoch(&theta, &c.schedule, &cfg, 1).unwrap());
    }

    #[test]
    fn nothing_to_learn_at_zero_temperature() {
        let c = ctx(2);
        let mut cfg = small_config(Method::ResGradDb);
        cfg.weights.beta = 0.0;
        // One update per epoch: after it, Adam would inflate roundoff.
        cfg.update_every_n_traj = 8;
        let mut st = FinetuneState::new(small_policy(2, 10, 1), &cfg, &c.schedule).unwrap();
        st.flow.set_final_scale(0.0);
        let stats = finetune_epoch(&mut st, &cfg, &c).unwrap();
        assert!(stats.grad_norm <= 1e-8, "{}", stats.grad_norm);
    }

    #[test]
    fn every_method_runs_and_is_deterministic() {
        let c = ctx(2);
        for m in Method::ALL {
            let cfg = small_config(m);
            let run = || {
                let mut st = FinetuneState::new(small_policy(2, 10, 3), &cfg, &c.schedule).unwrap();
                let mut recs = Vec::new();
                run_finetune(&mut st, &cfg, &c, &mut recs, |_, _| Ok(())).unwrap();
                (st.policy, recs)
            };
            let (p1, r1) = run();
            let (p2, r2) = run();
            assert_eq!(p1, p2, "{}", m.name());
            assert_eq!(eval::metrics_csv(&r1), eval::metrics_csv(&r2));
            assert_eq!(r1.len(), 3);
            assert_eq!(r1[2].step, 4);
        }
    }

    #[test]
    fn dagger_is_the_previous_update() {
        // Two updates per epoch; a run with only the first group of
        // trajectories stops after exactly the first update.
        let c = ctx(1);
        let mut cfg = small_config(Method::ResGradDb);
        cfg.weights.lambda_reg = 0.5;
        let mut st = FinetuneState::new(small_policy(1, 10, 5), &cfg, &c.schedule).unwrap();
        finetune_epoch(&mut st, &cfg, &c).unwrap();
        let one = FinetuneConfig {
            n_traj_per_epoch: 4,
            ..cfg.clone()
        };
        let mut replay = FinetuneState::new(small_policy(1, 10, 5), &one, &c.schedule).unwrap();
        finetune_epoch(&mut replay, &one, &c).unwrap();
        assert_eq!(st.updates, 2);
        assert_eq!(st.dagger, replay.policy);
        assert_ne!(st.dagger, st.policy);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let c = ctx(2);
        let mut cfg = small_config(Method::ResGradDb);
        cfg.epochs = 3;
        cfg.weights.gamma = Gamma::One;
        let mut full = FinetuneState::new(small_policy(2, 10, 4), &cfg, &c.schedule).unwrap();
        let mut recs = Vec::new();
        run_finetune(&mut full, &cfg, &c, &mut recs, |_, _| Ok(())).unwrap();

        let mut part = FinetuneState::new(small_policy(2, 10, 4), &cfg, &c.schedule).unwrap();
        let mut recs2 = Vec::new();
        let short = FinetuneConfig { epochs: 1, ..cfg.clone() };
        run_finetune(&mut part, &short, &c, &mut recs2, |_, _| Ok(())).unwrap();
        let mut resumed = part.clone();
        resumed.prev = sample_epoch(&resumed.behavior, &c.schedule, &cfg, resumed.epoch).unwrap();
        run_finetune(&mut resumed, &cfg, &c, &mut recs2, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.policy, full.policy);
        assert_eq!(eval::metrics_csv(&recs), eval::metrics_csv(&recs2));
    }

    #[test]
    fn config_validation() {
        let steps = 20;
        assert!(FinetuneConfig::default().validate(steps).is_ok());
        let bad = [
            FinetuneConfig { update_every_n_traj: 0, ..Default::default() },
            FinetuneConfig { grad_accum_steps: 3, ..Default::default() },
            FinetuneConfig { subsample_fraction: 0.01, ..Default::default() },
            FinetuneConfig { eval_every: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate(steps).is_err());
        }
    }
}

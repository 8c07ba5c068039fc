//! Pretrain-then-finetune pipeline on a small problem.

use std::sync::Arc;

use ngfn_core::data::DatasetSpec;
use ngfn_core::eval::MetricsRecord;
use ngfn_core::nets::{Mlp, MlpSpec};
use ngfn_core::optim::AdamConfig;
use ngfn_core::rewards::RewardSpec;
use ngfn_core::schedule::NoiseSchedule;
use ngfn_core::trainer::*;

fn setup() -> (Mlp, FinetuneContext) {
    let schedule = NoiseSchedule::linear(10, 0.02, 0.4).unwrap();
    let data = DatasetSpec::new(vec![vec![1.0, 1.0], vec![-1.0, -1.0]], vec![1.0, 1.0], 0.5).unwrap();
    let pc = PretrainConfig {
        steps: 400,
        batch: 64,
        adam: AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let (net, losses) = pretrain(&data, &schedule, &MlpSpec::policy(2, 10), &pc).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);
    let reward = Arc::new(RewardSpec::gmm(vec![vec![1.0, 1.0]], vec![1.0], 0.6).unwrap());
    let ctx = FinetuneContext {
        schedule,
        reward,
        oracle: None,
        eval: EvalConfig {
            n_samples: 1024,
            n_prior: 256,
        },
    };
    (net, ctx)
}

fn run(pre: &Mlp, ctx: &FinetuneContext, method: Method) -> Vec<MetricsRecord> {
    let cfg = FinetuneConfig {
        method,
        n_traj_per_epoch: 32,
        update_every_n_traj: 16,
        grad_accum_steps: 1,
        subsample_fraction: 0.3,
        epochs: 15,
        eval_every: 15,
        seed: 3,
        adam: AdamConfig {
            lr: 2e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut st = FinetuneState::new(pre.clone(), &cfg, &ctx.schedule).unwrap();
    let mut recs = Vec::new();
    run_finetune(&mut st, &cfg, ctx, &mut recs, |_, _| Ok(())).unwrap();
    recs
}

#[test]
fn finetuning_raises_reward_and_is_reproducible() {
    let (pre, ctx) = setup();
    let a = run(&pre, &ctx, Method::ResGradDb);
    let b = run(&pre, &ctx, Method::ResGradDb);
    assert_eq!(ngfn_core::eval::metrics_csv(&a), ngfn_core::eval::metrics_csv(&b));
    let (first, last) = (a[0], *a.last().unwrap());
    assert!(last.mean_reward > first.mean_reward, "{} -> {}", first.mean_reward, last.mean_reward);
    assert!(last.prior_distance > first.prior_distance);
}

#[test]
fn baselines_raise_reward() {
    let (pre, ctx) = setup();
    for m in [Method::DraftK, Method::Refl] {
        let r = run(&pre, &ctx, m);
        assert!(r.last().unwrap().mean_reward > r[0].mean_reward, "{}", m.name());
    }
}

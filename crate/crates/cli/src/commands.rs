//! Subcommand implementations. Each command owns its output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ngfn_core::data::DatasetSpec;
use ngfn_core::eval::{self, build_target_oracle, metrics_csv, GridOracle, MetricsRecord};
use ngfn_core::nets::Mlp;
use ngfn_core::objectives::LossBreakdown;
use ngfn_core::optim::Adam;
use ngfn_core::rewards::RewardSpec;
use ngfn_core::rng::{derive_seed, stream};
use ngfn_core::schedule::{sample_terminals, NoiseSchedule};
use ngfn_core::trainer::{
    self, evaluate, prior_samples, run_finetune, sample_epoch, FinetuneConfig, FinetuneContext, FinetuneState, Method,
};

use crate::checkpoint::Checkpoint;
use crate::config::{self, RunConfig};
use crate::error::{io_err, CliError, CliResult, Kind};
use crate::plots;

pub const KIND_PRETRAIN: &str = "pretrain";
pub const KIND_FINETUNE: &str = "finetune";

#[derive(Debug, Clone, Copy, Default)]
pub struct Options {
    /// Overwrite outputs and load checkpoints whose config hash differs.
    pub force: bool,
    pub emit_plots: bool,
}

/// Create `out`, refusing a non-empty directory unless forced.
pub fn prepare_out(out: &Path, force: bool) -> CliResult<()> {
    if out.exists() {
        let mut entries = std::fs::read_dir(out).map_err(|e| io_err(out, e))?;
        if entries.next().is_some() && !force {
            return Err(CliError::new(
                Kind::Io,
                format!("output directory {} is not empty; pass --force to reuse it", out.display()),
            ));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn put_schedule(ck: &mut Checkpoint, s: &NoiseSchedule) {
    ck.put("schedule.alpha_bar", vec![s.alpha_bar().len()], s.alpha_bar().to_vec());
}

fn check_schedule(ck: &Checkpoint, s: &NoiseSchedule) -> CliResult<()> {
    let a = &ck.get("schedule.alpha_bar")?.data;
    let same = a.len() == s.alpha_bar().len() && a.iter().zip(s.alpha_bar()).all(|(x, y)| x.to_bits() == y.to_bits());
    if same {
        Ok(())
    } else {
        Err(CliError::new(Kind::Checkpoint, "checkpoint schedule differs from the configured schedule"))
    }
}

fn check_hash(ck: &Checkpoint, key: &str, expected: &str, force: bool) -> CliResult<()> {
    let got = ck.meta(key)?;
    if got != expected && !force {
        return Err(CliError::new(
            Kind::Checkpoint,
            format!("{key} mismatch: checkpoint {got}, config {expected}; pass --force to load anyway"),
        ));
    }
    Ok(())
}

fn net_from(ck: &Checkpoint, prefix: &str, like: &Mlp) -> CliResult<Mlp> {
    Ok(Mlp::from_named_arrays(like.spec(), ck.lookup(prefix))?)
}

// ---------------------------------------------------------------------------
// pretrain

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub final_loss: f64,
    /// TV between terminal samples and the data density on the eval grid.
    pub data_tv: Option<f64>,
}

/// TV of `n` terminal samples against the dataset density on the grid.
pub fn data_tv(net: &Mlp, data: &DatasetSpec, schedule: &NoiseSchedule, grid: GridOracle, n: usize, seed: u64) -> CliResult<f64> {
    let oracle = grid.from_log_density(|x| data.density(x).ln())?;
    let samples = sample_terminals(net, schedule, data.dim(), n, derive_seed(seed, &[stream::EVAL]))?;
    Ok(eval::target_tv(&samples, &oracle)?)
}

/// Pretrain and package the result; also returns the per-step losses.
pub fn pretrain_checkpoint(cfg: &RunConfig) -> CliResult<(Checkpoint, Vec<f64>, PretrainReport)> {
    let schedule = cfg.noise_schedule()?;
    let data = cfg.dataset()?;
    let (net, history) = trainer::pretrain(&data, &schedule, &cfg.policy_spec(), &cfg.pretrain_config())?;
    let data_tv = match cfg.grid() {
        Some(g) if cfg.pretrain.tv_samples > 0 => Some(data_tv(&net, &data, &schedule, g, cfg.pretrain.tv_samples, cfg.seed)?),
        _ => None,
    };
    let mut ck = Checkpoint::default();
    ck.set_meta("kind", KIND_PRETRAIN);
    ck.set_meta("pretrain_hash", cfg.pretrain_hash());
    put_schedule(&mut ck, &schedule);
    ck.put_named("theta", net.named_arrays());
    ck.put_scalar("pretrain.steps", history.len() as f64);
    let report = PretrainReport {
        final_loss: history.last().copied().unwrap_or(f64::NAN),
        data_tv,
    };
    Ok((ck, history, report))
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, opts: Options) -> CliResult<PretrainReport> {
    prepare_out(out, opts.force)?;
    let (ck, history, report) = pretrain_checkpoint(cfg)?;
    ck.save(&out.join("pretrained.ngfn"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in history.iter().enumerate() {
        writeln!(csv, "{i},{l}").unwrap();
    }
    write(&out.join("pretrain_loss.csv"), &csv)?;
    let mut summary = format!("final_loss = {}\n", report.final_loss);
    if let Some(tv) = report.data_tv {
        writeln!(summary, "data_tv = {tv}").unwrap();
    }
    write(&out.join("summary.toml"), &summary)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// finetune state persistence

fn put_adam(ck: &mut Checkpoint, prefix: &str, opt: &Adam) {
    ck.put(format!("{prefix}.m"), vec![opt.m.len()], opt.m.clone());
    ck.put(format!("{prefix}.v"), vec![opt.v.len()], opt.v.clone());
    ck.put_scalar(&format!("{prefix}.step"), opt.step as f64);
}

fn get_adam(ck: &Checkpoint, prefix: &str, like: &Adam) -> CliResult<Adam> {
    let m = ck.get(&format!("{prefix}.m"))?.data.clone();
    let v = ck.get(&format!("{prefix}.v"))?.data.clone();
    if m.len() != like.m.len() || v.len() != like.v.len() {
        return Err(CliError::new(Kind::Checkpoint, format!("optimizer `{prefix}` has the wrong size")));
    }
    Ok(Adam {
        config: like.config,
        m,
        v,
        step: ck.scalar(&format!("{prefix}.step"))? as u64,
    })
}

pub fn finetune_checkpoint(
    state: &FinetuneState,
    cfg: &RunConfig,
    schedule: &NoiseSchedule,
    records: &[MetricsRecord],
) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.set_meta("kind", KIND_FINETUNE);
    ck.set_meta("config_hash", cfg.hash());
    ck.set_meta("pretrain_hash", cfg.pretrain_hash());
    ck.set_meta("method", cfg.finetune.method.clone());
    put_schedule(&mut ck, schedule);
    ck.put_named("theta", state.policy.named_arrays());
    ck.put_named("theta_pre", state.pretrained.named_arrays());
    ck.put_named("dagger", state.dagger.named_arrays());
    ck.put_named("behavior", state.behavior.named_arrays());
    ck.put_named("phi", state.flow.named_arrays());
    put_adam(&mut ck, "opt.theta", &state.opt_theta);
    put_adam(&mut ck, "opt.phi", &state.opt_phi);
    if let (Some(h), Some(o)) = (&state.correction, &state.opt_psi) {
        ck.put_named("psi", h.named_arrays());
        put_adam(&mut ck, "opt.psi", o);
    }
    ck.put_scalar("state.epoch", state.epoch as f64);
    ck.put_scalar("state.updates", state.updates as f64);
    let mut flat = Vec::with_capacity(records.len() * 10);
    for r in records {
        flat.push(r.step as f64);
        flat.extend(r.values());
    }
    ck.put("metrics", vec![records.len(), 10], flat);
    ck
}

/// Rebuild the complete run state; the training buffer is resampled from
/// its stored behavior policy, which reproduces it exactly.
pub fn restore_finetune(
    ck: &Checkpoint,
    cfg: &RunConfig,
    fcfg: &FinetuneConfig,
    schedule: &NoiseSchedule,
) -> CliResult<(FinetuneState, Vec<MetricsRecord>)> {
    let template = Mlp::zeros(&cfg.policy_spec());
    let pre = net_from(ck, "theta_pre", &template)?;
    let mut st = FinetuneState::new(pre, fcfg, schedule)?;
    st.policy = net_from(ck, "theta", &template)?;
    st.dagger = net_from(ck, "dagger", &template)?;
    st.behavior = net_from(ck, "behavior", &template)?;
    st.flow = net_from(ck, "phi", &st.flow)?;
    st.opt_theta = get_adam(ck, "opt.theta", &st.opt_theta)?;
    st.opt_phi = get_adam(ck, "opt.phi", &st.opt_phi)?;
    if let (Some(h), Some(o)) = (st.correction.as_mut(), st.opt_psi.as_mut()) {
        *h = net_from(ck, "psi", h)?;
        *o = get_adam(ck, "opt.psi", o)?;
    }
    st.epoch = ck.scalar("state.epoch")? as usize;
    st.updates = ck.scalar("state.updates")? as usize;
    st.prev = if fcfg.on_policy {
        Vec::new()
    } else {
        sample_epoch(&st.behavior, schedule, fcfg, st.epoch)?
    };
    let m = ck.get("metrics")?;
    if m.shape.len() != 2 || m.shape[1] != 10 {
        return Err(CliError::new(Kind::Checkpoint, "metrics array must have 10 columns"));
    }
    let records = m
        .data
        .chunks_exact(10)
        .map(|row| MetricsRecord::from_values(row[0] as usize, row[1..].try_into().unwrap()))
        .collect();
    Ok((st, records))
}

/// Target table for `target_tv`: `R^beta` alone for the plain objectives,
/// the pretrained histogram tilted by `R^beta` otherwise.
pub fn build_oracle(cfg: &RunConfig, method: Method, pretrained: &Mlp, reward: &RewardSpec, schedule: &NoiseSchedule) -> CliResult<Option<GridOracle>> {
    if !cfg.eval.oracle {
        return Ok(None);
    }
    let Some(grid) = cfg.grid() else {
        return Ok(None);
    };
    let beta = cfg.loss.beta;
    let oracle = if matches!(method, Method::GradDb | Method::DagDb) {
        grid.from_log_density(|x| beta * reward.log_reward(x))?
    } else {
        build_target_oracle(pretrained, reward, beta, schedule, grid, cfg.eval.n_dense, derive_seed(cfg.seed, &[stream::ORACLE]))?
    };
    Ok(Some(oracle))
}

fn context(cfg: &RunConfig, method: Method, pretrained: &Mlp, schedule: &NoiseSchedule) -> CliResult<FinetuneContext> {
    let reward = cfg.reward_spec()?;
    let oracle = build_oracle(cfg, method, pretrained, &reward, schedule)?;
    Ok(FinetuneContext {
        schedule: schedule.clone(),
        reward: Arc::new(reward),
        oracle,
        eval: cfg.eval_config(),
    })
}

/// Load the starting state from a pretrained or a finetune checkpoint.
pub fn load_state(
    ck: &Checkpoint,
    cfg: &RunConfig,
    fcfg: &FinetuneConfig,
    schedule: &NoiseSchedule,
    force: bool,
) -> CliResult<(FinetuneState, Vec<MetricsRecord>)> {
    check_schedule(ck, schedule)?;
    match ck.meta("kind")? {
        KIND_PRETRAIN => {
            check_hash(ck, "pretrain_hash", &cfg.pretrain_hash(), force)?;
            let pre = net_from(ck, "theta", &Mlp::zeros(&cfg.policy_spec()))?;
            Ok((FinetuneState::new(pre, fcfg, schedule)?, Vec::new()))
        }
        KIND_FINETUNE => {
            check_hash(ck, "config_hash", &cfg.hash(), force)?;
            restore_finetune(ck, cfg, fcfg, schedule)
        }
        other => Err(CliError::new(Kind::Checkpoint, format!("unknown checkpoint kind `{other}`"))),
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_{epoch:06}.ngfn")
}

/// Finetune from `checkpoint`; writes `metrics.csv` and one checkpoint per
/// evaluation. A failing run leaves `abort.ngfn` with the last state.
pub fn cmd_finetune(cfg: &RunConfig, checkpoint: &Path, out: &Path, opts: Options) -> CliResult<Vec<MetricsRecord>> {
    let ck = Checkpoint::load(checkpoint)?;
    let schedule = cfg.noise_schedule()?;
    let fcfg = cfg.finetune_config()?;
    let (mut state, mut records) = load_state(&ck, cfg, &fcfg, &schedule, opts.force)?;
    prepare_out(out, opts.force)?;
    let ctx = context(cfg, fcfg.method, &state.pretrained, &schedule)?;
    let metrics_path = out.join("metrics.csv");
    let result = run_finetune(&mut state, &fcfg, &ctx, &mut records, |st, recs| {
        finetune_checkpoint(st, cfg, &schedule, recs)
            .save(&out.join(checkpoint_name(st.epoch)))
            .map_err(|e| ngfn_core::Error::Precondition(e.to_string()))?;
        std::fs::write(&metrics_path, metrics_csv(recs)).map_err(|e| ngfn_core::Error::Precondition(e.to_string()))
    });
    if let Err(e) = result {
        finetune_checkpoint(&state, cfg, &schedule, &records).save(&out.join("abort.ngfn"))?;
        return Err(e.into());
    }
    write(&metrics_path, &metrics_csv(&records))?;
    if opts.emit_plots {
        plots::emit_plots(&records, out)?;
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// eval

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path, opts: Options) -> CliResult<MetricsRecord> {
    let ck = Checkpoint::load(checkpoint)?;
    let schedule = cfg.noise_schedule()?;
    let fcfg = cfg.finetune_config()?;
    let (state, _) = load_state(&ck, cfg, &fcfg, &schedule, opts.force)?;
    prepare_out(out, opts.force)?;
    let ctx = context(cfg, fcfg.method, &state.pretrained, &schedule)?;
    let prior = prior_samples(&state, &fcfg, &ctx)?;
    let record = evaluate(&state, &fcfg, &ctx, &prior, &LossBreakdown::default())?;
    write(&out.join("metrics.csv"), &metrics_csv(std::slice::from_ref(&record)))?;
    if let Some(o) = &ctx.oracle {
        let mut csv = String::from(if o.dim == 1 { "x,prob\n" } else { "x,y,prob\n" });
        for (i, p) in o.probs.iter().enumerate() {
            let c = o.center(i);
            let coords: Vec<String> = c.iter().map(|v| v.to_string()).collect();
            writeln!(csv, "{},{p}", coords.join(",")).unwrap();
        }
        write(&out.join("oracle.csv"), &csv)?;
    }
    Ok(record)
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub last: MetricsRecord,
}

fn value_label(v: &toml::Value) -> String {
    let raw = match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    raw.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect()
}

/// Non-dominated rows when maximizing both reward and diversity.
pub fn pareto_flags(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(r, d)| !points.iter().any(|&(r2, d2)| r2 >= r && d2 >= d && (r2 > r || d2 > d)))
        .collect()
}

/// Run every (value, seed) pair of the `[sweep]` section. Writes one
/// directory per run, `runs.csv` with the final record of each run and
/// `pareto.csv` with seed means per value.
pub fn cmd_sweep(table: &toml::Table, out: &Path, opts: Options) -> CliResult<Vec<SweepRow>> {
    let base = config::from_table(table.clone())?;
    let sweep = base
        .sweep
        .clone()
        .ok_or_else(|| CliError::new(Kind::Config, "the config has no [sweep] section"))?;
    prepare_out(out, opts.force)?;
    let pre_dir = out.join("pretrained");
    std::fs::create_dir_all(&pre_dir).map_err(|e| io_err(&pre_dir, e))?;
    let mut cache: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut rows = Vec::new();
    for v in &sweep.values {
        let label = value_label(v);
        for &seed in &sweep.seeds {
            let mut t = table.clone();
            t.remove("sweep");
            config::set_dotted(&mut t, &sweep.key, v.clone())?;
            t.insert("seed".into(), toml::Value::Integer(seed as i64));
            let cfg = config::from_table(t)?;
            let ph = cfg.pretrain_hash();
            let pre = match cache.get(&ph) {
                Some(p) => p.clone(),
                None => {
                    let path = pre_dir.join(format!("{}.ngfn", &ph[..16]));
                    pretrain_checkpoint(&cfg)?.0.save(&path)?;
                    cache.insert(ph, path.clone());
                    path
                }
            };
            let dir = out.join(format!("{}={label}", sweep.key)).join(format!("seed{seed}"));
            let recs = cmd_finetune(&cfg, &pre, &dir, opts)?;
            rows.push(SweepRow {
                value: label.clone(),
                seed,
                last: *recs.last().expect("a run records at least one evaluation"),
            });
        }
    }
    let mut runs = String::from("key,value,seed,");
    runs.push_str(eval::CSV_HEADER);
    runs.push('\n');
    for r in &rows {
        write!(runs, "{},{},{},{}", sweep.key, r.value, r.seed, r.last.step).unwrap();
        for x in r.last.values() {
            write!(runs, ",{x}").unwrap();
        }
        runs.push('\n');
    }
    write(&out.join("runs.csv"), &runs)?;

    let mut means = Vec::new();
    for v in &sweep.values {
        let label = value_label(v);
        let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.value == label).collect();
        let n = sel.len() as f64;
        let m = |f: fn(&MetricsRecord) -> f64| sel.iter().map(|r| f(&r.last)).sum::<f64>() / n;
        means.push((
            label,
            [m(|r| r.mean_reward), m(|r| r.diversity), m(|r| r.prior_distance), m(|r| r.target_tv)],
        ));
    }
    let flags = pareto_flags(&means.iter().map(|(_, m)| (m[0], m[1])).collect::<Vec<_>>());
    let mut pareto = String::from("key,value,n_seeds,mean_reward,diversity,prior_distance,target_tv,pareto\n");
    for ((label, m), f) in means.iter().zip(&flags) {
        writeln!(
            pareto,
            "{},{label},{},{},{},{},{},{}",
            sweep.key,
            sweep.seeds.len(),
            m[0],
            m[1],
            m[2],
            m[3],
            u8::from(*f)
        )
        .unwrap();
    }
    write(&out.join("pareto.csv"), &pareto)?;
    Ok(rows)
}

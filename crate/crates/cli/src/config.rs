//! Run configuration.
//!
//! A config is a TOML file of sections; keys may be written as dotted
//! paths (`schedule.T = 20`) or inside `[section]` tables. Unknown keys are
//! rejected. Every missing key takes the default below.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ngfn_core::baselines::BaselineConfig;
use ngfn_core::data::DatasetSpec;
use ngfn_core::eval::GridOracle;
use ngfn_core::nets::MlpSpec;
use ngfn_core::objectives::{FlAnchor, Gamma, LossWeights};
use ngfn_core::optim::AdamConfig;
use ngfn_core::rewards::{RewardKind, RewardSpec};
use ngfn_core::schedule::NoiseSchedule;
use ngfn_core::trainer::{EvalConfig, FinetuneConfig, Method, PretrainConfig};

use crate::error::{io_err, CliError, CliResult, Kind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub network: NetworkSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub reward: RewardSection,
    pub loss: LossSection,
    pub finetune: FinetuneSection,
    pub baseline: BaselineSection,
    pub eval: EvalSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
    pub embed_width: usize,
}

/// Pretraining data: isotropic Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_floor: f64,
    /// Terminal samples for the data-histogram sanity metric.
    pub tv_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKindName {
    Gmm,
    Ring,
    QuadraticWell,
    Tilt,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub kind: RewardKindName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stds: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<Vec<f64>>,
    pub floor: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaName {
    AlphaBar,
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorName {
    Policy,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub beta: f64,
    pub w_f: f64,
    pub w_b: f64,
    pub gamma: GammaName,
    pub fl_anchor: AnchorName,
    pub lambda_reg: f64,
    pub eta: f64,
    pub second_order: bool,
    pub use_correction: bool,
    pub smooth_c: f64,
    pub smooth_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub method: String,
    pub n_traj_per_epoch: usize,
    pub grad_accum_steps: usize,
    pub update_every_n_traj: usize,
    pub subsample_fraction: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub on_policy: bool,
    pub lr: f64,
    pub flow_hidden: Vec<usize>,
    pub correction_hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub clip_ratio: f64,
    pub stop_window: [f64; 2],
    pub k: usize,
    pub draft_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_samples: usize,
    pub n_prior: usize,
    /// Build a grid oracle (d <= 2) and report `target_tv`.
    pub oracle: bool,
    pub n_dense: usize,
    /// Bins per axis; 0 picks 200 in 1D and 50 in 2D.
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

/// One swept key; every value is run for every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Dotted config key, e.g. `loss.beta`.
    pub key: String,
    pub values: Vec<toml::Value>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleSection::default(),
            network: NetworkSection::default(),
            data: DataSection::default(),
            pretrain: PretrainSection::default(),
            reward: RewardSection::default(),
            loss: LossSection::default(),
            finetune: FinetuneSection::default(),
            baseline: BaselineSection::default(),
            eval: EvalSection::default(),
            sweep: None,
        }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 20,
            beta_start: 0.01,
            beta_end: 0.3,
        }
    }
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            hidden: MlpSpec::DEFAULT_HIDDEN.to_vec(),
            embed_width: MlpSpec::DEFAULT_EMBED,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            means: vec![vec![-1.5, -1.5], vec![1.5, 1.5]],
            weights: vec![1.0, 1.0],
            std: 0.5,
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch: 128,
            lr: 2e-3,
            lr_floor: 0.1,
            tv_samples: 100_000,
        }
    }
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            kind: RewardKindName::Gmm,
            means: Some(vec![vec![1.5, 1.5], vec![-1.5, -1.5]]),
            weights: Some(vec![1.0, 0.5]),
            std: Some(0.8),
            stds: None,
            radius: None,
            width: None,
            center: None,
            a: None,
            slope: None,
            floor: ngfn_core::rewards::DEFAULT_FLOOR,
            scale: 1.0,
        }
    }
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            beta: w.beta,
            w_f: w.w_f,
            w_b: w.w_b,
            gamma: GammaName::AlphaBar,
            fl_anchor: AnchorName::Policy,
            lambda_reg: w.lambda_reg,
            eta: w.eta,
            second_order: w.second_order,
            use_correction: w.use_correction,
            smooth_c: w.smooth_c,
            smooth_n: w.smooth_n,
        }
    }
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self {
            method: f.method.name().into(),
            n_traj_per_epoch: f.n_traj_per_epoch,
            grad_accum_steps: f.grad_accum_steps,
            update_every_n_traj: f.update_every_n_traj,
            subsample_fraction: f.subsample_fraction,
            epochs: f.epochs,
            eval_every: f.eval_every,
            on_policy: f.on_policy,
            lr: f.adam.lr,
            flow_hidden: f.flow_hidden,
            correction_hidden: f.correction_hidden,
        }
    }
}

impl Default for BaselineSection {
    fn default() -> Self {
        let b = BaselineConfig::default();
        Self {
            clip_ratio: b.clip_ratio,
            stop_window: [b.stop_window.0, b.stop_window.1],
            k: b.k,
            draft_noise: b.draft_noise,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            n_samples: e.n_samples,
            n_prior: e.n_prior,
            oracle: true,
            n_dense: 100_000,
            bins: 0,
            lo: -4.0,
            hi: 4.0,
        }
    }
}

fn cfg_err(m: impl Into<String>) -> CliError {
    CliError::new(Kind::Config, m)
}

/// Parse config text without validating it.
pub fn parse_table(text: &str) -> CliResult<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| cfg_err(e.to_string()))
}

pub fn from_table(table: toml::Table) -> CliResult<RunConfig> {
    let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    from_table(parse_table(&text)?)
}

/// Set a dotted key in a config table, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| cfg_err(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

fn to_toml<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("config sections serialize")
}

impl RunConfig {
    pub fn dim(&self) -> usize {
        self.data.means.first().map_or(0, |m| m.len())
    }

    /// Hash of everything that determines a finetuning run.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.sweep = None;
        sha256_hex(&to_toml(&c))
    }

    /// Hash of everything that determines pretraining.
    pub fn pretrain_hash(&self) -> String {
        #[derive(Serialize)]
        struct P<'a> {
            seed: u64,
            schedule: &'a ScheduleSection,
            network: &'a NetworkSection,
            data: &'a DataSection,
            pretrain: &'a PretrainSection,
        }
        sha256_hex(&to_toml(&P {
            seed: self.seed,
            schedule: &self.schedule,
            network: &self.network,
            data: &self.data,
            pretrain: &self.pretrain,
        }))
    }

    pub fn noise_schedule(&self) -> CliResult<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)?)
    }

    pub fn policy_spec(&self) -> MlpSpec {
        let mut s = MlpSpec::policy(self.dim(), self.schedule.steps).with_hidden(self.network.hidden.clone());
        s.embed_width = self.network.embed_width;
        s
    }

    pub fn dataset(&self) -> CliResult<DatasetSpec> {
        Ok(DatasetSpec::new(self.data.means.clone(), self.data.weights.clone(), self.data.std)?)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain.steps,
            batch: self.pretrain.batch,
            adam: AdamConfig {
                lr: self.pretrain.lr,
                ..Default::default()
            },
            lr_floor: self.pretrain.lr_floor,
            seed: self.seed,
        }
    }

    pub fn reward_spec(&self) -> CliResult<RewardSpec> {
        let r = &self.reward;
        let need = |name: &str| cfg_err(format!("reward.{name} is required for kind {:?}", r.kind));
        let spec = match r.kind {
            RewardKindName::Gmm => {
                let means = r.means.clone().ok_or_else(|| need("means"))?;
                let weights = r.weights.clone().unwrap_or_else(|| vec![1.0; means.len()]);
                let stds = match (&r.stds, r.std) {
                    (Some(s), None) => s.clone(),
                    (None, Some(s)) => vec![s; means.len()],
                    (None, None) => return Err(need("std")),
                    (Some(_), Some(_)) => return Err(cfg_err("set only one of reward.std and reward.stds")),
                };
                RewardSpec::new(RewardKind::Gmm { means, weights, stds })?
            }
            RewardKindName::Ring => {
                RewardSpec::ring(r.radius.ok_or_else(|| need("radius"))?, r.width.ok_or_else(|| need("width"))?)?
            }
            RewardKindName::QuadraticWell => RewardSpec::quadratic_well(
                r.center.clone().ok_or_else(|| need("center"))?,
                r.a.ok_or_else(|| need("a"))?,
            )?,
            RewardKindName::Tilt => RewardSpec::tilt(r.slope.clone().ok_or_else(|| need("slope"))?)?,
            RewardKindName::Constant => RewardSpec::constant(self.dim()),
        };
        Ok(spec.with_floor(r.floor)?.with_scale(r.scale)?)
    }

    pub fn method(&self) -> CliResult<Method> {
        Ok(Method::parse(&self.finetune.method)?)
    }

    pub fn loss_weights(&self) -> LossWeights {
        let l = &self.loss;
        LossWeights {
            beta: l.beta,
            w_f: l.w_f,
            w_b: l.w_b,
            gamma: match l.gamma {
                GammaName::AlphaBar => Gamma::AlphaBar,
                GammaName::One => Gamma::One,
            },
            fl_anchor: match l.fl_anchor {
                AnchorName::Policy => FlAnchor::Policy,
                AnchorName::Pretrained => FlAnchor::Pretrained,
            },
            lambda_reg: l.lambda_reg,
            eta: l.eta,
            second_order: l.second_order,
            use_correction: l.use_correction,
            smooth_c: l.smooth_c,
            smooth_n: l.smooth_n,
        }
    }

    pub fn finetune_config(&self) -> CliResult<FinetuneConfig> {
        let f = &self.finetune;
        Ok(FinetuneConfig {
            method: self.method()?,
            weights: self.loss_weights(),
            baseline: BaselineConfig {
                clip_ratio: self.baseline.clip_ratio,
                stop_window: (self.baseline.stop_window[0], self.baseline.stop_window[1]),
                k: self.baseline.k,
                draft_noise: self.baseline.draft_noise,
            },
            n_traj_per_epoch: f.n_traj_per_epoch,
            grad_accum_steps: f.grad_accum_steps,
            update_every_n_traj: f.update_every_n_traj,
            subsample_fraction: f.subsample_fraction,
            epochs: f.epochs,
            seed: self.seed,
            eval_every: f.eval_every,
            on_policy: f.on_policy,
            adam: AdamConfig {
                lr: f.lr,
                ..Default::default()
            },
            flow_hidden: f.flow_hidden.clone(),
            correction_hidden: f.correction_hidden.clone(),
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_samples: self.eval.n_samples,
            n_prior: self.eval.n_prior,
        }
    }

    /// Empty grid for oracles, or `None` when d > 2.
    pub fn grid(&self) -> Option<GridOracle> {
        let d = self.dim();
        if !(1..=2).contains(&d) {
            return None;
        }
        let bins = match (self.eval.bins, d) {
            (0, 1) => 200,
            (0, _) => 50,
            (b, _) => b,
        };
        Some(GridOracle::empty(d, bins, self.eval.lo, self.eval.hi))
    }

    /// Re-check every module invariant.
    pub fn validate(&self) -> CliResult<()> {
        let d = self.dim();
        if d == 0 {
            return Err(cfg_err("data.means must hold at least one non-empty mean"));
        }
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) || self.network.embed_width == 0 {
            return Err(cfg_err("network widths must be positive"));
        }
        let schedule = self.noise_schedule()?;
        self.dataset()?;
        let reward = self.reward_spec()?;
        if let Some(rd) = reward.dim() {
            if rd != d {
                return Err(cfg_err(format!("reward dimension {rd} differs from data dimension {d}")));
            }
        }
        if self.pretrain.batch == 0 || !(self.pretrain.lr >= 0.0) || !(0.0..=1.0).contains(&self.pretrain.lr_floor) {
            return Err(cfg_err("pretrain needs batch > 0, lr >= 0 and lr_floor in [0, 1]"));
        }
        self.finetune_config()?.validate(schedule.steps())?;
        if !(self.finetune.lr >= 0.0) {
            return Err(cfg_err("finetune.lr must be non-negative"));
        }
        if self.eval.n_samples == 0 || self.eval.n_prior == 0 {
            return Err(cfg_err("eval sample counts must be positive"));
        }
        if self.eval.oracle && d <= 2 {
            if self.eval.n_dense < 100_000 {
                return Err(cfg_err("eval.n_dense must be at least 100000"));
            }
            if !(self.eval.lo < self.eval.hi) {
                return Err(cfg_err("eval.lo must be below eval.hi"));
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(cfg_err("sweep.values is empty"));
            }
            if s.seeds.is_empty() {
                return Err(cfg_err("sweep.seeds is empty"));
            }
            if s.key.is_empty() || s.key == "seed" || s.key.starts_with("sweep") {
                return Err(cfg_err(format!("`{}` cannot be swept", s.key)));
            }
        }
        Ok(())
    }
}

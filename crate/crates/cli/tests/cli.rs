//! End-to-end checks of the `ngfn` binary and command layer.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use ngfn::checkpoint::Checkpoint;
use ngfn::commands::{self, Options};
use ngfn::config::{self, RunConfig};
use ngfn_core::eval::parse_metrics_csv;
use tempfile::TempDir;

const QUICK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/quick.toml");

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ngfn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The quick config with `extra` (TOML) overriding its keys.
fn quick_table(extra: &str) -> toml::Table {
    fn flatten(prefix: &str, t: toml::Table, out: &mut Vec<(String, toml::Value)>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(inner) => flatten(&key, inner, out),
                v => out.push((key, v)),
            }
        }
    }
    let mut t = config::parse_table(&std::fs::read_to_string(QUICK).unwrap()).unwrap();
    let mut pairs = Vec::new();
    flatten("", extra.parse::<toml::Table>().unwrap(), &mut pairs);
    for (k, v) in pairs {
        config::set_dotted(&mut t, &k, v).unwrap();
    }
    t
}

fn quick_with(extra: &str) -> RunConfig {
    config::from_table(quick_table(extra)).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, toml::to_string(&quick_table(extra)).unwrap()).unwrap();
    p
}

fn opts() -> Options {
    Options { force: false, emit_plots: false }
}

/// Quick pretrained checkpoint shared across tests.
fn quick_pretrained() -> &'static PathBuf {
    static P: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    &P.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let out = dir.path().join("pre");
        commands::cmd_pretrain(&quick_with(""), &out, opts()).unwrap();
        let p = out.join("pretrained.ngfn");
        (dir, p)
    })
    .1
}

#[test]
fn zero_step_pretrain_writes_initial_weights() {
    let dir = TempDir::new().unwrap();
    let cfg = quick_with("pretrain.steps = 0");
    let out = dir.path().join("o");
    commands::cmd_pretrain(&cfg, &out, opts()).unwrap();
    let a = Checkpoint::load(&out.join("pretrained.ngfn")).unwrap();
    let (b, _, _) = commands::pretrain_checkpoint(&cfg).unwrap();
    assert_eq!(a.arrays, b.arrays);
    assert_eq!(a.meta("kind").unwrap(), "pretrain");
}

#[test]
fn default_pretrain_fits_two_modes() {
    let dir = TempDir::new().unwrap();
    let cfg = config::from_table(toml::Table::new()).unwrap();
    let r = commands::cmd_pretrain(&cfg, dir.path(), Options { force: true, emit_plots: false }).unwrap();
    let tv = r.data_tv.unwrap();
    assert!(tv <= 0.1, "data TV {tv}");
}

#[test]
fn unknown_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "loss.bta = 2.0");
    let o = run(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let e = stderr(&o);
    assert!(e.starts_with("ngfn-error kind=config code=3"), "{e}");
    assert!(e.contains("bta"), "{e}");
}

#[test]
fn bad_usage_exits_two() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind=usage"));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_exits_nonzero() {
    let dir = TempDir::new().unwrap();
    let o = run(&[
        "finetune",
        "--config",
        QUICK,
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--checkpoint",
        dir.path().join("nope.ngfn").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("kind=io"));
}

#[test]
fn invalid_thread_count_is_rejected() {
    let dir = TempDir::new().unwrap();
    let o = bin()
        .env("NGFN_THREADS", "zero")
        .args(["pretrain", "--config", QUICK, "--out", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("NGFN_THREADS"));
}

#[test]
fn non_empty_output_needs_force() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("junk"), "x").unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["pretrain", "--config", QUICK, "--out", out]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let o = run(&["pretrain", "--config", QUICK, "--out", out, "--force"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn metrics_every_eval_and_plots() {
    let dir = TempDir::new().unwrap();
    let cfg = quick_with("");
    let recs = commands::cmd_finetune(&cfg, quick_pretrained(), dir.path(), Options { force: false, emit_plots: true }).unwrap();
    // Two updates per epoch, evaluated every second epoch.
    let steps: Vec<usize> = recs.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 4, 8]);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(parse_metrics_csv(&csv).unwrap().len(), 3);
    assert!(dir.path().join("checkpoint_000004.ngfn").exists());
    assert!(dir.path().join("mean_reward.svg").exists());
}

#[test]
fn every_method_runs() {
    for m in ["res_grad_db", "grad_db", "dag_db", "res_db", "ddpo", "refl", "draft_k", "draft_lv"] {
        let dir = TempDir::new().unwrap();
        let cfg = quick_with(&format!("finetune.method = \"{m}\"\nfinetune.epochs = 2\nfinetune.eval_every = 1"));
        let recs = commands::cmd_finetune(&cfg, quick_pretrained(), dir.path(), opts()).unwrap_or_else(|e| panic!("{m}: {e}"));
        assert_eq!(recs.len(), 3, "{m}");
        assert!(recs.iter().all(|r| r.mean_reward.is_finite()), "{m}");
    }
}

#[test]
fn resume_reproduces_metrics() {
    let dir = TempDir::new().unwrap();
    let cfg = quick_with("");
    let full = dir.path().join("full");
    commands::cmd_finetune(&cfg, quick_pretrained(), &full, opts()).unwrap();
    let resumed = dir.path().join("resumed");
    commands::cmd_finetune(&cfg, &full.join("checkpoint_000002.ngfn"), &resumed, opts()).unwrap();
    assert_eq!(
        std::fs::read(full.join("metrics.csv")).unwrap(),
        std::fs::read(resumed.join("metrics.csv")).unwrap()
    );
}

#[test]
fn config_hash_mismatch_needs_force() {
    let dir = TempDir::new().unwrap();
    let other = write_config(dir.path(), "pretrain.steps = 301");
    let args = |force: bool| {
        let mut v = vec![
            "finetune".to_string(),
            "--config".into(),
            other.to_str().unwrap().into(),
            "--out".into(),
            dir.path().join(if force { "b" } else { "a" }).to_str().unwrap().into(),
            "--checkpoint".into(),
            quick_pretrained().to_str().unwrap().into(),
        ];
        if force {
            v.push("--force".into());
        }
        bin().args(v).env("NGFN_THREADS", "1").output().unwrap()
    };
    let o = args(false);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("hash"));
    let o = args(true);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn eval_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = quick_with("");
    let a = commands::cmd_eval(&cfg, quick_pretrained(), &dir.path().join("a"), opts()).unwrap();
    let b = commands::cmd_eval(&cfg, quick_pretrained(), &dir.path().join("b"), opts()).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(dir.path().join("a/metrics.csv")).unwrap(),
        std::fs::read(dir.path().join("b/metrics.csv")).unwrap()
    );
}

#[test]
fn zero_temperature_eval_matches_pretrained() {
    let dir = TempDir::new().unwrap();
    let cfg = quick_with("loss.beta = 0.0\neval.n_samples = 100000\neval.n_dense = 200000\neval.bins = 20");
    let r = commands::cmd_eval(&cfg, quick_pretrained(), dir.path(), Options { force: true, emit_plots: false }).unwrap();
    assert!(r.target_tv <= 0.05, "target TV {}", r.target_tv);
}

#[test]
fn beta_sweep_writes_runs_and_pareto() {
    let dir = TempDir::new().unwrap();
    let t = quick_table("finetune.epochs = 2\n[sweep]\nkey = \"loss.beta\"\nvalues = [1.0, 4.0]\nseeds = [0, 1]\n");
    let rows = commands::cmd_sweep(&t, dir.path(), opts()).unwrap();
    assert_eq!(rows.len(), 4);
    let runs: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert!(runs.iter().any(|n| n.starts_with("loss.beta=")), "{runs:?}");
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let p = entry.unwrap().path();
        if p.file_name().unwrap().to_str().unwrap().starts_with("loss.beta=") {
            assert!(p.join("seed0/metrics.csv").exists() && p.join("seed1/metrics.csv").exists());
        }
    }
    let pareto = std::fs::read_to_string(dir.path().join("pareto.csv")).unwrap();
    assert_eq!(pareto.lines().count(), 3);
    assert!(pareto.starts_with("key,value,n_seeds"));
    // One pretrained model per seed, shared across beta values.
    assert_eq!(std::fs::read_dir(dir.path().join("pretrained")).unwrap().count(), 2);
}

#[test]
fn empty_sweep_is_an_error() {
    let text = std::fs::read_to_string(QUICK).unwrap() + "\n[sweep]\nkey = \"loss.beta\"\nvalues = []\n";
    let err = config::parse_table(&text).and_then(config::from_table).unwrap_err();
    assert_eq!(err.kind.exit_code(), 3);
}

//! Command-line front end: configuration, checkpoints, subcommands and
//! plot emission.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod plots;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::Options;
use crate::error::{CliError, CliResult, Kind};

#[derive(Debug, Parser)]
#[command(name = "ngfn", version, about = "Gradient-informed GFlowNet finetuning of toy diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reuse a non-empty output directory and accept config-hash mismatches.
    #[arg(long)]
    pub force: bool,
    /// Write one SVG chart per metric next to the CSV.
    #[arg(long)]
    pub emit_plots: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the denoiser on the configured dataset.
    Pretrain(Common),
    /// Finetune from a pretrained checkpoint, or resume a finetune checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the `[sweep]` section of the config.
    Sweep(Common),
}

fn load_table(c: &Common) -> CliResult<toml::Table> {
    let text = std::fs::read_to_string(&c.config).map_err(|e| error::io_err(&c.config, e))?;
    let mut t = config::parse_table(&text)?;
    if let Some(seed) = c.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::new(Kind::Usage, "seed exceeds the TOML integer range"))?;
        t.insert("seed".into(), toml::Value::Integer(seed));
    }
    Ok(t)
}

fn options(c: &Common) -> Options {
    Options {
        force: c.force,
        emit_plots: c.emit_plots,
    }
}

/// Cap the rayon pool from `NGFN_THREADS`.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("NGFN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::new(Kind::Usage, format!("NGFN_THREADS must be a positive integer, got `{v}`")))?;
    // A pool built earlier in the process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Execute a parsed command; returns the lines to print on stdout.
pub fn execute(cli: Cli) -> CliResult<Vec<String>> {
    init_threads()?;
    let mut lines = Vec::new();
    match cli.command {
        Command::Pretrain(c) => {
            let cfg = config::from_table(load_table(&c)?)?;
            let r = commands::cmd_pretrain(&cfg, &c.out, options(&c))?;
            lines.push(format!("pretrain final_loss={}", r.final_loss));
            if let Some(tv) = r.data_tv {
                lines.push(format!("pretrain data_tv={tv}"));
            }
        }
        Command::Finetune { common: c, checkpoint } => {
            let cfg = config::from_table(load_table(&c)?)?;
            let recs = commands::cmd_finetune(&cfg, &checkpoint, &c.out, options(&c))?;
            let last = recs.last().expect("at least one evaluation");
            lines.push(format!(
                "finetune step={} mean_reward={} diversity={} target_tv={}",
                last.step, last.mean_reward, last.diversity, last.target_tv
            ));
        }
        Command::Eval { common: c, checkpoint } => {
            let cfg = config::from_table(load_table(&c)?)?;
            let r = commands::cmd_eval(&cfg, &checkpoint, &c.out, options(&c))?;
            lines.push(ngfn_core::eval::CSV_HEADER.to_string());
            lines.push(ngfn_core::eval::metrics_csv(&[r]).lines().nth(1).unwrap().to_string());
        }
        Command::Sweep(c) => {
            let t = load_table(&c)?;
            let rows = commands::cmd_sweep(&t, &c.out, options(&c))?;
            lines.push(format!("sweep runs={}", rows.len()));
        }
    }
    Ok(lines)
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::new(Kind::Usage, first).line());
            return Kind::Usage.exit_code();
        }
    };
    match execute(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.line());
            e.kind.exit_code()
        }
    }
}

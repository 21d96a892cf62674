//! Command-line front end: `train`, `sample`, `ablate` and `analyze`.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

pub use commands::{cmd_ablate, cmd_analyze, cmd_sample, cmd_train, RunWriter, Sweep};
pub use config::{help_table, RunConfig, REGISTRY};

use crate::error::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "glab", version, about = "Guided diffusion sampling on desk-scale models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the tiny attention denoiser (or the vector MLP) on a built-in dataset.
    Train {
        #[command(flatten)]
        shared: Shared,
        /// Training data: procedural or mixture2d.
        #[arg(long)]
        dataset: Option<String>,
        /// SGD steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run guided reverse sampling from a checkpoint or the mixture oracle.
    Sample {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Sweep one guidance setting and tabulate sample metrics.
    Ablate {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        sampling: Sampling,
        /// `axis=v1,v2,...` over scale, sigma, psi, strategy or layer.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Frequency, IoU and attention heatmaps for a finished sample run.
    Analyze {
        #[command(flatten)]
        shared: Shared,
        /// Output directory of a `sample` run.
        #[arg(long = "run")]
        run_dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
pub struct Shared {
    /// `key = value` file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Any registry key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Default)]
pub struct Sampling {
    /// none, cg, cfg, blur, sag or sag_cfg.
    #[arg(long)]
    pub guidance: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub scale: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub scale_cfg: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub scale_sag: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub psi: Option<f64>,
    /// Attention layer name, e.g. attn0.
    #[arg(long)]
    pub layer: Option<String>,
    /// Diffusion steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of chains.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use the closed-form 2-D mixture denoiser.
    #[arg(long)]
    pub oracle: bool,
    /// Also sample unguided chains from the same seeds.
    #[arg(long)]
    pub compare_baseline: bool,
}

fn put<T: ToString>(cfg: &mut RunConfig, key: &str, v: Option<T>) -> Result<()> {
    match v {
        Some(v) => cfg.set(key, v.to_string()),
        None => Ok(()),
    }
}

fn base_config(shared: &Shared) -> Result<RunConfig> {
    let mut cfg = match &shared.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    put(&mut cfg, "seed", shared.seed)?;
    put(&mut cfg, "out", shared.out.as_ref().map(|p| p.display().to_string()))?;
    for kv in &shared.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn apply_sampling(cfg: &mut RunConfig, s: &Sampling) -> Result<()> {
    put(cfg, "guidance", s.guidance.as_ref())?;
    put(cfg, "scale", s.scale)?;
    put(cfg, "scale_cfg", s.scale_cfg)?;
    put(cfg, "scale_sag", s.scale_sag)?;
    put(cfg, "sigma", s.sigma)?;
    put(cfg, "psi", s.psi)?;
    put(cfg, "layer", s.layer.as_ref())?;
    put(cfg, "timesteps", s.steps)?;
    put(cfg, "n", s.n)?;
    put(cfg, "class", s.class)?;
    put(cfg, "strategy", s.strategy.as_ref())?;
    put(cfg, "checkpoint", s.checkpoint.as_ref().map(|p| p.display().to_string()))?;
    if s.oracle {
        cfg.set("oracle", true)?;
    }
    if s.compare_baseline {
        cfg.set("compare_baseline", true)?;
    }
    Ok(())
}

/// Resolves flags and config file into one validated configuration.
pub fn resolve(command: &Command) -> Result<RunConfig> {
    match command {
        Command::Train { shared, dataset, steps } => {
            let mut cfg = base_config(shared)?;
            put(&mut cfg, "dataset", dataset.as_ref())?;
            put(&mut cfg, "train_steps", *steps)?;
            Ok(cfg)
        }
        Command::Sample { shared, sampling } => {
            let mut cfg = base_config(shared)?;
            apply_sampling(&mut cfg, sampling)?;
            Ok(cfg)
        }
        Command::Ablate { shared, sampling, sweep } => {
            let mut cfg = base_config(shared)?;
            apply_sampling(&mut cfg, sampling)?;
            put(&mut cfg, "sweep", sweep.as_ref())?;
            Ok(cfg)
        }
        Command::Analyze { shared, run_dir } => {
            let mut cfg = base_config(shared)?;
            put(&mut cfg, "run_dir", run_dir.as_ref().map(|p| p.display().to_string()))?;
            Ok(cfg)
        }
    }
}

pub fn execute(command: &Command) -> Result<PathBuf> {
    let cfg = resolve(command)?;
    match command {
        Command::Train { .. } => cmd_train(&cfg),
        Command::Sample { .. } => cmd_sample(&cfg),
        Command::Ablate { .. } => cmd_ablate(&cfg),
        Command::Analyze { .. } => cmd_analyze(&cfg),
    }
}

fn command_with_help() -> clap::Command {
    let table = help_table();
    let mut cmd = Cli::command().after_long_help(table.clone());
    for name in ["train", "sample", "ablate", "analyze"] {
        let t = table.clone();
        cmd = cmd.mut_subcommand(name, |c| c.after_long_help(t));
    }
    cmd
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 for configuration errors, 3 for
/// numeric failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command_with_help().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match execute(&cli.command) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! `auxloc`: generate synthetic data, train, evaluate, colorize, ablate.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

/// Operator mistakes (bad flags, unknown keys, refused overwrites); exit 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "auxloc", version, about = "Camera pose regression with a colorization auxiliary task")]
#[command(after_help = config::help_text())]
struct Cli {
    /// Configuration file of `key=value` lines
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replace existing outputs
    #[arg(long, global = true)]
    force: bool,
    /// Worker cap [default: 1]
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Override one configuration key; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset into --out
    GenData,
    /// Train a model; checkpoints, log and resolved config go to --out
    Train {
        /// Dataset directory (data.dir)
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Disable the colorization branch
        #[arg(long)]
        no_aux: bool,
        /// Disable attention
        #[arg(long)]
        no_attention: bool,
        /// Training epochs (train.epochs)
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the latest checkpoint in --out
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint: metrics report, trajectory CSV, optional masks
    Eval {
        /// Checkpoint file, or a training directory (latest checkpoint)
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset directory (data.dir)
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Write attention masks (attention models only)
        #[arg(long)]
        export_masks: bool,
    },
    /// Predict the chroma of an image from its lightness
    Colorize {
        /// Checkpoint file, or a training directory (latest checkpoint)
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Input PPM or PGM; extents must be multiples of 16
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Output PPM [default: <out>/<input stem>_color.ppm]
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Train baseline, +auxiliary, +auxiliary+attention for each seed
    Ablate {
        /// Dataset directory (data.dir)
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Comma-separated seeds (ablate.seeds)
        #[arg(long, value_name = "LIST")]
        seeds: Option<String>,
        /// Training epochs per run (train.epochs)
        #[arg(long)]
        epochs: Option<usize>,
    },
}

/// Layers the configuration: defaults, file, `--set`, then flags.
fn resolve(cli: &Cli, base: Option<PathBuf>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = cli.config.as_ref().or(base.as_ref()) {
        cfg.apply_file(path)?;
    }
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", s.to_string())?;
    }
    if let Some(o) = &cli.out {
        cfg.set("out", o.display().to_string())?;
    }
    if let Some(t) = cli.threads {
        cfg.set("threads", t.to_string())?;
    }
    let path = |p: &PathBuf| p.display().to_string();
    match &cli.command {
        Command::GenData => {}
        Command::Train {
            data,
            no_aux,
            no_attention,
            epochs,
            ..
        } => {
            if let Some(d) = data {
                cfg.set("data.dir", path(d))?;
            }
            if *no_aux {
                cfg.set("model.use_auxiliary", "false")?;
            }
            if *no_attention {
                cfg.set("model.use_attention", "false")?;
            }
            if let Some(e) = epochs {
                cfg.set("train.epochs", e.to_string())?;
            }
        }
        Command::Eval { data, .. } => {
            if let Some(d) = data {
                cfg.set("data.dir", path(d))?;
            }
        }
        Command::Colorize { .. } => {}
        Command::Ablate { data, seeds, epochs } => {
            if let Some(d) = data {
                cfg.set("data.dir", path(d))?;
            }
            if let Some(s) = seeds {
                cfg.set("ablate.seeds", s.clone())?;
            }
            if let Some(e) = epochs {
                cfg.set("train.epochs", e.to_string())?;
            }
        }
    }
    cfg.threads()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let force = cli.force;
    match &cli.command {
        Command::GenData => commands::gen_data(&resolve(&cli, None)?, force),
        Command::Train { resume, .. } => commands::train(&resolve(&cli, None)?, force, *resume),
        Command::Eval {
            checkpoint,
            export_masks,
            ..
        } => {
            let ckpt = commands::resolve_checkpoint(checkpoint)?;
            let cfg = resolve(&cli, commands::saved_config(&ckpt))?;
            commands::eval(&cfg, &ckpt, force, *export_masks)
        }
        Command::Colorize {
            checkpoint,
            image,
            output,
        } => {
            let ckpt = commands::resolve_checkpoint(checkpoint)?;
            let cfg = resolve(&cli, commands::saved_config(&ckpt))?;
            commands::colorize(&cfg, &ckpt, image, output.as_deref(), force)
        }
        Command::Ablate { .. } => commands::ablate(&resolve(&cli, None)?, force),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

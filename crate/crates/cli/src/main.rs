//! Experiment pipeline driver.
//!
//! Stages: `train-base` → `gen-data` → `train-rm` → `train-rl [--dynamic]`,
//! plus `gsb` for pairwise model comparisons, `report` for a consolidated
//! summary, and `gradcheck` for the gradient integrity suite. All stages
//! are deterministic given the config seed; `--workers` only changes wall
//! clock, never results.

mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use prefflow_core::config::ExperimentConfig;
use stages::Ctx;

#[derive(Parser, Debug)]
#[command(name = "prefflow", version, about = "Mask-conditioned generation with preference-based fine-tuning")]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Thread-pool size (results are independent of this value).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base generator with flow matching.
    TrainBase,
    /// Generate candidate sets and preference pairs from the base model.
    GenData,
    /// Train the pairwise reward model and the scalar baseline.
    TrainRm,
    /// Fine-tune the policy against the frozen reward model.
    TrainRl {
        /// Use the EMA-updated reference instead of a frozen one.
        #[arg(long)]
        dynamic: bool,
    },
    /// Good–Same–Bad comparison of two generator checkpoints.
    Gsb {
        /// First model (defaults to <out>/policy.ckpt).
        #[arg(long)]
        model_a: Option<PathBuf>,
        /// Second model (defaults to <out>/base.ckpt).
        #[arg(long)]
        model_b: Option<PathBuf>,
    },
    /// Consolidated summary of all completed stages.
    Report,
    /// Verify analytic gradients against central differences.
    Gradcheck,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let cfg: ExperimentConfig = toml::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            cfg
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .context("configuring worker pool")?;
    }
    let cfg = load_config(&cli)?;
    let out = PathBuf::from(&cfg.out_dir);
    let ctx = Ctx::new(cfg, out)?;
    match cli.command {
        Command::TrainBase => stages::cmd_train_base(&ctx),
        Command::GenData => stages::cmd_gen_data(&ctx),
        Command::TrainRm => stages::cmd_train_rm(&ctx),
        Command::TrainRl { dynamic } => stages::cmd_train_rl(&ctx, dynamic),
        Command::Gsb { model_a, model_b } => stages::cmd_gsb(&ctx, model_a, model_b),
        Command::Report => stages::cmd_report(&ctx),
        Command::Gradcheck => stages::cmd_gradcheck(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = format!("{:?}", cli.command);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Machine-readable error record on stderr.
            let record = serde_json::json!({
                "error": format!("{e:#}"),
                "command": command,
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

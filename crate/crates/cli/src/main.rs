mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use selfaug::eval::SweepAxis;
use selfaug::objectives::Method;

use commands::Status;
use config::Overrides;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  error (bad config, missing input, refused overwrite, failed run)
  2  pretraining gate failed, or a sweep stopped with only some points done

Output directory: io.out_dir in the config, overridden by SELFAUG_OUT_DIR.";

/// Fine-tuning lab: pretrain a small base, fine-tune it with LoRA, SFT or
/// LoRA with input-logit self-distillation, and sweep the knobs.
#[derive(Parser)]
#[command(name = "selfaug", version, after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; missing keys take their defaults.
    #[arg(short, long, value_name = "FILE")]
    config: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on the general corpus and check the probe gate.
    #[command(after_help = EXIT_CODES)]
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune the base on the downstream task with per-epoch metrics.
    #[command(after_help = EXIT_CODES)]
    Finetune {
        #[command(flatten)]
        common: Common,
        /// sft, lora, lora+orthogonal, lora+selfaug or lora+feature:<site>.
        #[arg(long)]
        method: Option<Method>,
        /// Weight of the self-distillation term (lora+selfaug only).
        #[arg(long)]
        alpha: Option<f64>,
        /// Adapter rank; the adapter multiplier is kept.
        #[arg(long)]
        rank: Option<usize>,
        /// Downstream context length.
        #[arg(long)]
        ctx_len: Option<usize>,
    },
    /// Fine-tune once per (axis value, seed) and summarise final metrics.
    #[command(after_help = EXIT_CODES)]
    Sweep {
        #[command(flatten)]
        common: Common,
        /// alpha, rank, ctx_len, method or position.
        #[arg(long)]
        axis: SweepAxis,
        /// Concurrent sub-runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Rebuild summary.json and table.txt from a sweep directory.
    #[command(after_help = EXIT_CODES)]
    Report {
        dir: PathBuf,
        /// Overwrite a summary that differs from the fresh one.
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = config::load(&common.config, &Overrides::default())?;
            commands::cmd_pretrain(&cfg, common.force)
        }
        Command::Finetune {
            common,
            method,
            alpha,
            rank,
            ctx_len,
        } => {
            let overrides = Overrides {
                method,
                alpha,
                rank,
                ctx_len,
            };
            let cfg = config::load(&common.config, &overrides)?;
            commands::cmd_finetune(&cfg, common.force)
        }
        Command::Sweep { common, axis, jobs } => {
            let cfg = config::load(&common.config, &Overrides::default())?;
            commands::cmd_sweep(&cfg, axis, jobs.max(1), common.force)
        }
        Command::Report { dir, force } => commands::cmd_report(&dir, force),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Incomplete(why)) => {
            eprintln!("incomplete: {why}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

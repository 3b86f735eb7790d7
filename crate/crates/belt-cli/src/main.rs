//! `belt`: drives the poisoning/training/measurement pipeline from one TOML
//! experiment config. Exit codes: 0 success, 2 config error, 3 runtime
//! failure.

mod config;
mod plot;
mod report;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use belt_core::excl::ObjectiveMode;
use clap::{Parser, Subcommand, ValueEnum};

use config::ExperimentConfig;
use stages::StageCtx;

#[derive(Parser)]
#[command(
    name = "belt",
    about = "Backdoor exclusivity toolkit: train, measure, defend, report",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StageArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory override (falls back to BELT_OUTPUT_DIR, then the
    /// config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for this invocation.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct CheckpointArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Trained model checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Intuitive,
    NoDirection,
    StaticLambda,
}

impl From<ModeArg> for ObjectiveMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => ObjectiveMode::Full,
            ModeArg::Intuitive => ObjectiveMode::Intuitive,
            ModeArg::NoDirection => ObjectiveMode::NoDirection,
            ModeArg::StaticLambda => ObjectiveMode::StaticLambda,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Poison the training set and train a model; writes checkpoint.bin,
    /// train_report.json and run.json.
    Train(StageArgs),
    /// Measure backdoor exclusivity of a checkpoint.
    Excl {
        #[command(flatten)]
        args: CheckpointArgs,
        /// Bound-search objective variant.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Reverse-engineer per-class triggers and compute the anomaly index.
    Nc(CheckpointArgs),
    /// Perturbation-entropy screening of clean vs triggered inputs.
    Strip(CheckpointArgs),
    /// Clean accuracy and attack success rate of a checkpoint.
    Eval(CheckpointArgs),
    /// Merge run records into a comparison table and plots.
    Report {
        /// Run directories (each holding run.json, or parents of such).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where the table and plots go.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Errors surfaced before any compute starts (bad flags, unreadable or
/// invalid config) exit with 2; failures during a stage exit with 3.
fn load_ctx(args: &StageArgs) -> Result<StageCtx> {
    let cfg = ExperimentConfig::load(&args.config)?;
    Ok(StageCtx::new(cfg, args.out.clone(), args.seed))
}

fn run() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let ctx = match load_ctx(&args) {
                Ok(ctx) => ctx,
                Err(e) => return config_failure(e),
            };
            let record = stages::stage_train(&ctx)?;
            log::info!(
                "trained: cda={:?} asr={:?} -> {}",
                record.metrics.cda,
                record.metrics.asr,
                ctx.out_dir.display()
            );
        }
        Command::Excl { args, mode } => {
            let ctx = match load_ctx(&args.stage) {
                Ok(ctx) => ctx,
                Err(e) => return config_failure(e),
            };
            let record = stages::stage_excl(&ctx, &args.checkpoint, mode.map(Into::into))?;
            log::info!("exclusivity: {:?}", record.metrics.excl);
        }
        Command::Nc(args) => {
            let ctx = match load_ctx(&args.stage) {
                Ok(ctx) => ctx,
                Err(e) => return config_failure(e),
            };
            let record = stages::stage_nc(&ctx, &args.checkpoint)?;
            log::info!("anomaly index: {:?}", record.metrics.nc_index);
        }
        Command::Strip(args) => {
            let ctx = match load_ctx(&args.stage) {
                Ok(ctx) => ctx,
                Err(e) => return config_failure(e),
            };
            let record = stages::stage_strip(&ctx, &args.checkpoint)?;
            log::info!("entropy overlap: {:?}", record.metrics.strip_overlap);
        }
        Command::Eval(args) => {
            let ctx = match load_ctx(&args.stage) {
                Ok(ctx) => ctx,
                Err(e) => return config_failure(e),
            };
            let record = stages::stage_eval(&ctx, &args.checkpoint)?;
            log::info!(
                "eval: cda={:?} asr={:?}",
                record.metrics.cda,
                record.metrics.asr
            );
        }
        Command::Report { runs, out } => {
            if runs.is_empty() {
                return config_failure(anyhow::anyhow!("report needs at least one run directory"));
            }
            let produced = report::write_report(&runs, &out)?;
            for path in produced {
                log::info!("wrote {}", path.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn config_failure(e: anyhow::Error) -> Result<ExitCode> {
    eprintln!("config error: {e:#}");
    Ok(ExitCode::from(2))
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

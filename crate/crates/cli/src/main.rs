mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::EvalArgs;
use config::Overrides;
use exit::CliError;

#[derive(Parser, Debug)]
#[command(name = "tlkit", version, about = "Train and evaluate two-class image classifiers on pretrained backbones")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; per-purpose seeds derive from it unless set in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Refuse to draw seeds from entropy.
    #[arg(long, global = true)]
    strict_repro: bool,
    /// Output (run) directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Two-stage training; writes checkpoint, history, metrics and config snapshot.
    Train,
    /// Hyperband search over head architectures; writes the best config.
    Tune,
    /// Evaluates a checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Backbone archive to check the checkpoint against.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Defaults to the seed the checkpoint was trained with.
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Writes learning-curve CSVs (and optionally PNGs) from a run directory.
    ExportCurves {
        run_dir: PathBuf,
        #[arg(long)]
        plot: bool,
    },
    /// Lists an archive's manifest and entries and verifies its checksum.
    InspectArchive { path: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let flags = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        strict_repro: cli.strict_repro,
    };
    match &cli.command {
        Command::Train => {
            let cfg = commands::load_config(cli.config.as_deref(), &flags)?;
            commands::train(&cfg)?;
        }
        Command::Tune => {
            let cfg = commands::load_config(cli.config.as_deref(), &flags)?;
            commands::tune(&cfg)?;
        }
        Command::Eval {
            checkpoint,
            dataset,
            backbone,
            split_seed,
        } => {
            let cfg = commands::load_config(cli.config.as_deref(), &flags)?;
            let args = EvalArgs {
                checkpoint,
                dataset: dataset.as_deref(),
                backbone: backbone.as_deref(),
                split_seed: *split_seed,
            };
            commands::eval(&cfg, &args)?;
        }
        Command::ExportCurves { run_dir, plot } => {
            commands::export(run_dir, cli.out.as_deref(), *plot)?;
        }
        Command::InspectArchive { path } => {
            if !commands::inspect(path)? {
                return Err(CliError::data(format!("{}: payload checksum mismatch", path.display())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use owl_cli::commands::{
    calibrate::{self, CalibrateArgs},
    caption::{self, CaptionArgs},
    evaluate::{self, EvaluateArgs},
    gen_corpus::{self, GenCorpusArgs},
    report::{self, ReportArgs},
    sweep::{self, SweepArgs},
    train::{self, TrainArgs},
};

/// Desk-scale attention-intervention decoding laboratory.
#[derive(Parser)]
#[command(name = "owl", version, about)]
struct Cli {
    /// Flat TOML config file; CLI flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scene grammar and train/eval corpora.
    GenCorpus(GenCorpusArgs),
    /// Train the testbed model on a corpus.
    Train(TrainArgs),
    /// Fit per-layer VTACR base scores from hallucinated tokens.
    Calibrate(CalibrateArgs),
    /// Decode one scene with full diagnostics.
    Caption(CaptionArgs),
    /// Run a metric suite (chair / pope / tce) for one strategy.
    Evaluate(EvaluateArgs),
    /// Aggregate evaluation directories into a comparison table.
    Report(ReportArgs),
    /// Grid-sweep the intervention knobs.
    Sweep(SweepArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    if let Err(err) = owl_cli::init_thread_pool() {
        eprintln!("error: {err:#}");
        return ExitCode::from(1);
    }

    let config_file = cli.config.as_deref();
    let result = match &cli.command {
        Command::GenCorpus(args) => gen_corpus::run(args, config_file),
        Command::Train(args) => train::run(args, config_file),
        Command::Calibrate(args) => calibrate::run(args, config_file),
        Command::Caption(args) => caption::run(args, config_file),
        Command::Evaluate(args) => evaluate::run(args, config_file),
        Command::Report(args) => report::run(args),
        Command::Sweep(args) => sweep::run(args, config_file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(owl_cli::classify_error(&err) as u8)
        }
    }
}

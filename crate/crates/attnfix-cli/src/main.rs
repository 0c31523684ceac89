//! `attnfix`: train small transformer victims, detect over-attention
//! columns, and repair predictions by patching attention maps at
//! inference time.
//!
//! Exit codes: 0 success, 1 contract/usage error, 2 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

mod atpt;
mod checkpoint;
mod commands;
mod config;
mod dataset;
mod errors;
mod pipeline;
mod report;

use config::{Mode, Overrides, RunConfig};
use errors::CliError;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Streaming,
    TwoPass,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Streaming => Mode::Streaming,
            ModeArg::TwoPass => Mode::TwoPass,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "attnfix",
    about = "Attention-map hot-fixing for small transformer classifiers",
    version
)]
struct Cli {
    /// Path to the JSON run configuration.
    #[arg(long, global = true, default_value = "configs/backdoor.json")]
    config: PathBuf,
    /// Override the base seed (replaces the config's seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the detector threshold tau.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Override the hot-fix mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the seeded train/test datasets and write them as JSON.
    GenData,
    /// Write the poisoned training set and the planted trigger (backdoor).
    Poison,
    /// Train the victim model on the scenario's training data.
    TrainVictim,
    /// Reconstruct the trigger by gradient inversion (backdoor).
    InvertTrigger,
    /// Distill the debugging set of clean/compromised pairs.
    BuildDebugset,
    /// Train the over-attention detector on the debugging set.
    TrainDetector,
    /// Average clean attention maps into the benign reference.
    BuildQref,
    /// Evaluate accuracy and attack/fairness metrics before and after repair.
    Evaluate,
    /// Run the w/o-detector and w/o-rescale ablations.
    Ablate,
    /// Zero each attention column in turn and report attack survival.
    ProbeZeroColumn,
    /// Measure single-sample inference latency with and without the fix.
    BenchLatency,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    let overrides = Overrides {
        seed: cli.seed,
        tau: cli.tau,
        mode: cli.mode.map(Mode::from),
        out: cli.out,
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Poison => commands::poison(&cfg),
        Command::TrainVictim => commands::train_victim(&cfg),
        Command::InvertTrigger => commands::invert_trigger(&cfg),
        Command::BuildDebugset => commands::build_debugset(&cfg),
        Command::TrainDetector => commands::train_detector_cmd(&cfg),
        Command::BuildQref => commands::build_qref(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::ProbeZeroColumn => commands::probe_zero_column(&cfg),
        Command::BenchLatency => commands::bench_latency(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; everything else is a
            // usage (contract) error
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

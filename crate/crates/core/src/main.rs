use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dkdm::harness::{run, RunKind};
use dkdm::Error;

#[derive(Parser)]
#[command(
    name = "dkdm",
    version,
    about = "Data-free distillation of diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher on procedural data.
    TrainTeacher(Args),
    /// Distill a student from a teacher checkpoint.
    Distill(Args),
    /// Write a teacher-generated dataset.
    Synthesize(Args),
    /// Export samples from a checkpoint.
    Sample(Args),
    /// Score a checkpoint against held-out data.
    Eval(Args),
    /// Run a strategy comparison or a rho sweep.
    Ablate(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::TrainTeacher(a) => (RunKind::TrainTeacher, a),
        Command::Distill(a) => (RunKind::Distill, a),
        Command::Synthesize(a) => (RunKind::Synthesize, a),
        Command::Sample(a) => (RunKind::Sample, a),
        Command::Eval(a) => (RunKind::Eval, a),
        Command::Ablate(a) => (RunKind::Ablate, a),
    };
    match run(kind, &args.config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("{}: {e}", args.config.display());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

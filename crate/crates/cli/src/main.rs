use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lax_kit::commands::{cmd_equivalence, cmd_gradcheck, cmd_report, cmd_train};

#[derive(Parser)]
#[command(
    name = "lax-kit",
    version,
    about = "Train, check and cost low-rank models with latent crossing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config; writes history.csv, summary.json and final.ckpt.
    Train { config: PathBuf },
    /// Finite-difference check of a reduced copy of the configured model.
    Gradcheck { config: PathBuf },
    /// Run the built-in equivalence suites.
    Equivalence,
    /// Parameter and FLOP table for a config.
    Report {
        config: PathBuf,
        /// Sequence length for FLOP counts; defaults to the model's own.
        #[arg(long)]
        seq_len: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config } => cmd_train(config),
        Command::Gradcheck { config } => cmd_gradcheck(config),
        Command::Equivalence => cmd_equivalence(),
        Command::Report { config, seq_len } => cmd_report(config, *seq_len),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

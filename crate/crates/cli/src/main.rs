use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dilattn_cli::commands::{self, RunConfig};
use dilattn_cli::verify::Suite;
use dilattn_cli::CliError;
use dilattn_core::DType;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

/// Dilated attention and layer-wise distillation for a ViT encoder.
#[derive(Debug, Parser)]
#[command(name = "dilattn", version)]
struct Cli {
    /// TOML config for `distill` or `bench`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    dtype: Option<DTypeArg>,
    /// Restrict `verify` to these suites (repeatable; default all).
    #[arg(long = "suite", global = true, value_enum)]
    suites: Vec<Suite>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the correctness suites against independent oracles.
    Verify {
        #[arg(long, hide = true, value_parser = ["recompose"])]
        inject_fault: Option<String>,
    },
    /// Write synthetic images and masks.
    GenData {
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
    /// Distill a teacher encoder into a dilated-attention student.
    Distill,
    /// Time dense against dilated attention.
    Bench,
    /// Print IoU, Dice, focal, and fine-tune losses for a mask pair.
    Losses { pred: PathBuf, target: PathBuf },
}

fn run(cli: Cli) -> Result<String, CliError> {
    let rc = RunConfig {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        workers: cli.workers,
        dtype: cli.dtype.map(DType::from),
    };
    match cli.command {
        Command::Verify { inject_fault } => commands::cmd_verify(&cli.suites, inject_fault.is_some()),
        Command::GenData { count, image_size } => commands::cmd_gen_data(&rc, count, image_size),
        Command::Distill => commands::cmd_distill(&rc),
        Command::Bench => commands::cmd_bench(&rc),
        Command::Losses { pred, target } => commands::cmd_losses(&pred, &target),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let CliError::Verification { table, .. } = &e {
                print!("{table}");
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

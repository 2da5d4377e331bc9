use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use memloc::{run, CliError, Command, Overrides, RunConfig};
use memloc_core::DType;

#[derive(Parser)]
#[command(name = "memloc", version, about = "Train under label noise and localize memorization")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "memloc.toml")]
    config: PathBuf,
    /// Output directory; overrides the config and MEMLOC_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    dtype: Option<Dtype>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Train and checkpoint every epoch.
    Train,
    /// Train with per-layer gradient accounting.
    Account,
    /// Rewind each layer to earlier checkpoints.
    Rewind,
    /// Retrain layers from initialization on clean examples only.
    Retrain,
    /// Greedy unit removal until predictions flip.
    Flip,
    /// Example-tied dropout, grid, and baselines.
    Etdrop,
}

#[derive(ValueEnum, Clone, Copy)]
enum Dtype {
    F32,
    F64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cmd = match cli.command {
        Cmd::Train => Command::Train,
        Cmd::Account => Command::Account,
        Cmd::Rewind => Command::Rewind,
        Cmd::Retrain => Command::Retrain,
        Cmd::Flip => Command::Flip,
        Cmd::Etdrop => Command::Etdrop,
    };
    let overrides = Overrides {
        out: cli.out,
        seed: cli.seed,
        jobs: cli.jobs,
        dtype: cli.dtype.map(|d| match d {
            Dtype::F32 => DType::F32,
            Dtype::F64 => DType::F64,
        }),
    };
    let env_out = std::env::var_os("MEMLOC_OUT").map(PathBuf::from);
    let result: Result<Vec<String>, CliError> =
        RunConfig::load(&cli.config).and_then(|c| c.resolve(&overrides, env_out)).and_then(|c| {
            let files = run(cmd, &c)?;
            println!("{}: wrote {} to {}", cmd.name(), files.join(", "), c.out_dir().display());
            Ok(files)
        });
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

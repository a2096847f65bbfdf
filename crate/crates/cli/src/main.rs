use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfspde_cli::{execute, Command, Overrides};

#[derive(Debug, Parser)]
#[command(name = "mfspde", version, about = "Mean-field SPDE simulation, control and verification")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Execute the experiment described by a config file.
    Run { config: PathBuf },
    /// Run the verification bundle of a config file.
    Verify { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(k) = cli.workers.filter(|&k| k > 0) {
        #[cfg(feature = "parallel")]
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: cannot start {k} workers: {e}");
            return ExitCode::from(2);
        }
        #[cfg(not(feature = "parallel"))]
        let _ = k;
    }
    let overrides = Overrides {
        out: cli.out,
        workers: cli.workers,
        seed: cli.seed,
    };
    let (command, config) = match cli.command {
        Cmd::Run { config } => (Command::Run, config),
        Cmd::Verify { config } => (Command::Verify, config),
    };
    ExitCode::from(execute(command, &config, &overrides) as u8)
}

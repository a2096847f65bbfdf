//! Config-driven front end for the mfspde solvers: `run` executes one
//! experiment, `verify` runs a bundle of checks. Both write CSVs plus a
//! manifest into the output directory.

pub mod assemble;
pub mod config;
pub mod error;
pub mod experiments;
pub mod report;
pub mod verify;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::report::{Phase, Report, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    Verify,
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    versions: Versions,
    workers: usize,
    phases: &'a [Phase],
    total_seconds: f64,
    verdicts: &'a [Verdict],
    files: Vec<&'a str>,
    exit_code: i32,
}

#[derive(Debug, Serialize)]
struct Versions {
    mfspde: &'static str,
    cli: &'static str,
}

/// Loads the config, applies overrides and resolves the output directory.
pub fn prepare(config: &Path, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn write_outputs(cfg: &ExperimentConfig, command: Command, report: &Report, total: f64, exit_code: i32) -> Result<(), CliError> {
    let dir = &cfg.output.dir;
    let io = |e: std::io::Error, p: &Path| CliError::Io(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
    for (name, body) in &report.files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| io(e, &path))?;
    }
    let echo = cfg.to_toml()?;
    let path = dir.join("resolved_config.toml");
    std::fs::write(&path, echo).map_err(|e| io(e, &path))?;
    let manifest = Manifest {
        command: match command {
            Command::Run => "run",
            Command::Verify => "verify",
        },
        config: cfg,
        versions: Versions {
            mfspde: mfspde::VERSION,
            cli: env!("CARGO_PKG_VERSION"),
        },
        workers: mfspde::exec::worker_count(),
        phases: &report.phases,
        total_seconds: total,
        verdicts: &report.verdicts,
        files: report.files.iter().map(|(n, _)| n.as_str()).collect(),
        exit_code,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    let path = dir.join("manifest.json");
    std::fs::write(&path, json).map_err(|e| io(e, &path))?;
    Ok(())
}

/// Runs a command and returns the process exit code. Messages go to
/// stdout (results) and stderr (errors).
pub fn execute(command: Command, config: &Path, overrides: &Overrides) -> i32 {
    let start = Instant::now();
    let cfg = match prepare(config, overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let result = match command {
        Command::Run => experiments::run(&cfg),
        Command::Verify => verify::verify(&cfg),
    };
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    for (key, value) in &report.summary {
        println!("{key} = {value}");
    }
    for v in &report.verdicts {
        println!("{}", v.line());
    }
    let code = if report.verdicts.iter().all(|v| v.passed) { 0 } else { 1 };
    if let Err(e) = write_outputs(&cfg, command, &report, start.elapsed().as_secs_f64(), code) {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    code
}

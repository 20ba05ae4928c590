// SPDX-License-Identifier: MIT OR Apache-2.0

//! `headlens` command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid arguments or inputs, 2 I/O or format
//! errors, 3 numeric failures.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use headlens::{Error, ErrorKind};

use args::{Cli, Command, InterpretCommand, BUILD_ID};
use commands::Touched;
use manifest::{digest, RunManifest};

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 1,
        ErrorKind::Io => 2,
        ErrorKind::Numeric => 3,
    }
}

fn run(cli: &Cli) -> headlens::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("--threads: {e}")))?;
    }
    let start = Instant::now();
    let mut touched = Touched::default();
    match &cli.command {
        Command::Decompose(a) => commands::decompose(a, &mut touched),
        Command::Locate(a) => commands::locate(a, &mut touched),
        Command::Correct(a) => commands::correct(a, &mut touched),
        Command::Evaluate(a) => commands::evaluate(a, &mut touched),
        Command::Interpret(InterpretCommand::Heatmap(a)) => commands::heatmap(a, &mut touched),
        Command::Interpret(InterpretCommand::Shap(a)) => commands::shap(a, &mut touched),
        Command::Synth(a) => commands::synth(a, &mut touched),
        Command::Sweep(a) => commands::sweep_cmd(a, &mut touched),
    }?;
    let primary = touched
        .outputs
        .first()
        .cloned()
        .expect("every command writes an output");
    let record = RunManifest {
        subcommand: cli.command.name().to_owned(),
        version: BUILD_ID.to_owned(),
        config: serde_json::to_value(&cli.command).map_err(|e| Error::Json {
            path: primary.clone(),
            source: e,
        })?,
        inputs: touched
            .inputs
            .iter()
            .map(|p| digest(p))
            .collect::<headlens::Result<_>>()?,
        outputs: touched
            .outputs
            .iter()
            .map(|p| digest(p))
            .collect::<headlens::Result<_>>()?,
        seed: touched.seed,
        threads: cli.threads,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    let path = record.write(&primary)?;
    log::info!("run manifest {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

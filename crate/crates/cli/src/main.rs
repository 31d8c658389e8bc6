//! `distill`: command-line driver for the score distillation engine.
//!
//! Exit codes: 0 on success, 1 for configuration or I/O problems, 2 when a
//! run aborts on non-finite numbers (a diagnostics file is left in the
//! output directory).

mod commands;
mod selftest;

use clap::{Parser, Subcommand};
use commands::{CompareArgs, DumpArgs, RenderArgs, RunArgs};
use distill_core::Error;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "distill", version, about = "Score distillation runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment described by a config file.
    Run(RunArgs),
    /// Run several guidance/FreeU policies from one base config.
    Compare(CompareArgs),
    /// Inspect schedules without optimizing.
    #[command(subcommand)]
    Schedule(ScheduleCmd),
    /// Render a saved voxel grid to PPM images.
    Render(RenderArgs),
    /// Check the numerical kernels against independent references.
    Selftest,
}

#[derive(Subcommand)]
enum ScheduleCmd {
    /// Write one CSV row per iteration with every scheduled value.
    Dump(DumpArgs),
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(a) => commands::cmd_run(a),
        Cmd::Compare(a) => commands::cmd_compare(a),
        Cmd::Schedule(ScheduleCmd::Dump(a)) => commands::cmd_schedule_dump(a),
        Cmd::Render(a) => commands::cmd_render(a),
        Cmd::Selftest => selftest::cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NumericalAbort { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

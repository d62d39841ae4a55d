mod diagnose;
mod error;
mod fit;
mod risk;
mod simulate;
mod study;
mod weight;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::{CliError, CliResult};

/// Absolute-risk models from a cohort calibrated to a probability survey.
#[derive(Debug, Parser)]
#[command(name = "riskcal", version, about)]
struct Cli {
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, env = "RISKCAL_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Kernel-weighted pseudoweights for cohort units, optionally poststratified.
    Weight(weight::WeightArgs),
    /// Weighted Cox fit and baseline cumulative hazard.
    Fit(fit::FitArgs),
    /// Absolute risk and confidence intervals for a covariate profile.
    Risk(risk::RiskArgs),
    /// Covariate balance of the weighted cohort against the survey.
    Diagnose(diagnose::DiagnoseArgs),
    /// Monte Carlo study on a synthetic finite population.
    Simulate(simulate::SimulateArgs),
}

fn dispatch(cli: Cli) -> CliResult<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| error::config(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Weight(a) => weight::run(a),
        Command::Fit(a) => fit::run(a),
        Command::Risk(a) => risk::run(a),
        Command::Diagnose(a) => diagnose::run(a),
        Command::Simulate(a) => simulate::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let e: CliError = e;
            eprintln!("{}", e.report());
            ExitCode::from(e.exit_code())
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use log::error;
use powermin::harness::{power_db, RunStatus};
use powermin::{run_experiment, ExperimentConfig, InitMode, ScenarioConfig};

/// Minimum-power linear precoding for the MIMO broadcast channel with
/// average-rate targets under partial channel knowledge.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    /// TOML experiment file. Without it the reference two-user scenario is used.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the trace, solution and report files.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Initial split of each user's rate over its streams.
    #[arg(long, value_enum)]
    init: Option<Init>,
    /// Monte Carlo channel samples.
    #[arg(long, value_name = "M")]
    samples: Option<usize>,
    /// Cap on outer iterations.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Stop once one accepted step lowers the power by at most this much.
    #[arg(long)]
    gamma: Option<f64>,
    /// Initial outer step size.
    #[arg(long)]
    step: Option<f64>,
    /// Seed of the fresh samples used for validation.
    #[arg(long)]
    validate_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Init {
    Equal,
    Random,
}

const USAGE_ERROR: u8 = 1;

fn build_config(cli: &Cli) -> powermin::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(ScenarioConfig::reference(), "out"),
    };
    let scenario = &mut config.scenario;
    if let Some(seed) = cli.seed {
        scenario.seed = seed;
    }
    if let Some(samples) = cli.samples {
        scenario.samples = samples;
    }
    if let Some(iters) = cli.max_iters {
        scenario.max_outer_iters = iters;
    }
    if let Some(gamma) = cli.gamma {
        scenario.gamma = gamma;
    }
    if let Some(step) = cli.step {
        scenario.step_size = step;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(init) = cli.init {
        config.init = match init {
            Init::Equal => InitMode::Equal,
            Init::Random => InitMode::Random,
        };
    }
    if let Some(seed) = cli.validate_seed {
        config.validation_seed = Some(seed);
    }
    config.validate()?;
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(USAGE_ERROR) } else { ExitCode::SUCCESS };
        }
    };
    let config = match build_config(&cli) {
        Ok(config) => config,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(USAGE_ERROR);
        }
    };
    let outcome = match run_experiment(&config) {
        Ok(outcome) => outcome,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(USAGE_ERROR);
        }
    };

    match (&outcome.status, &outcome.result) {
        (RunStatus::Infeasible, _) => {
            println!("status: infeasible");
            if let Some(report) = &outcome.feasibility {
                println!(
                    "sum of MMSE targets {:.6}; smallest sum-MMSE of the last filters tried {:.6}",
                    report.lhs, report.bound_rhs
                );
            }
        }
        (status, Some(result)) => {
            let power = result.solution.total_power;
            println!("status: {}", format!("{status:?}").to_lowercase());
            println!("accepted iterations: {}", result.trace.accepted_iterations());
            println!("total power: {power:.10} ({:.4} dB)", power_db(power));
            if let Some(report) = &outcome.validation {
                for user in &report.users {
                    println!(
                        "user {}: rate {:.4} bits (target {:.4}, margin {:+.4})",
                        user.user + 1,
                        user.achieved_rate,
                        user.target_rate,
                        user.margin
                    );
                }
            }
        }
        (_, None) => {}
    }
    println!("output: {}", config.output_dir.display());
    ExitCode::from(outcome.status.exit_code() as u8)
}

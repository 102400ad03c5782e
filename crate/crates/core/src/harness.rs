//! Experiment runs: configuration, execution, artifact files and an
//! out-of-sample check of the final precoders.
//!
//! Every run writes into one output directory:
//!
//! | file               | content                                              |
//! |--------------------|------------------------------------------------------|
//! | `trace.csv`        | one row per accepted outer iteration                 |
//! | `targets.csv`      | per-stream targets per iteration                     |
//! | `power.csv`        | total power (linear and dB) per iteration            |
//! | `solution.json`    | downlink precoders and per-stream figures            |
//! | `validation.json`  | [`ValidationReport`] on a fresh sample set           |
//! | `feasibility.json` | sum-MMSE feasibility report of the final (or failed) filters |
//!
//! Numbers in the delimited files use 17 significant digits so that they
//! parse back to the same `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::channel::{build_scenario, sample_channels, PartialCsi, ScenarioConfig, WhitenedChannels};
use crate::error::{Error, Result};
use crate::inner::{BcSolution, Problem};
use crate::layout::StreamLayout;
use crate::mse::{self, FeasibilityReport};
use crate::outer::{minimize_power, InitMode, OuterOptions, OuterResult, OuterStatus, OuterTrace};

pub const TRACE_FILE: &str = "trace.csv";
pub const TARGETS_FILE: &str = "targets.csv";
pub const POWER_FILE: &str = "power.csv";
pub const SOLUTION_FILE: &str = "solution.json";
pub const VALIDATION_FILE: &str = "validation.json";
pub const FEASIBILITY_FILE: &str = "feasibility.json";

/// Which optional artifacts to write. The trace and the feasibility report
/// are always written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportFlags {
    /// `targets.csv` and `power.csv`.
    pub convergence: bool,
    pub solution: bool,
    pub validation: bool,
}

impl Default for ExportFlags {
    fn default() -> Self {
        Self {
            convergence: true,
            solution: true,
            validation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_init")]
    pub init: InitMode,
    /// Fresh channel samples for validation; at least `scenario.samples`.
    /// Zero means four times `scenario.samples`.
    #[serde(default)]
    pub validation_samples: usize,
    /// Seed of the validation samples. Defaults to a value derived from the
    /// scenario seed.
    #[serde(default)]
    pub validation_seed: Option<u64>,
    #[serde(default)]
    pub export: ExportFlags,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_init() -> InitMode {
    InitMode::Equal
}

impl ExperimentConfig {
    pub fn new(scenario: ScenarioConfig, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            scenario,
            output_dir: output_dir.into(),
            init: InitMode::Equal,
            validation_samples: 0,
            validation_seed: None,
            export: ExportFlags::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.validation_samples != 0 && self.validation_samples < self.scenario.samples {
            return Err(Error::Config(format!(
                "validation_samples ({}) must be at least samples ({})",
                self.validation_samples, self.scenario.samples
            )));
        }
        Ok(())
    }

    pub fn effective_validation_samples(&self) -> usize {
        if self.validation_samples == 0 {
            4 * self.scenario.samples
        } else {
            self.validation_samples
        }
    }

    pub fn effective_validation_seed(&self) -> u64 {
        self.validation_seed
            .unwrap_or(self.scenario.seed ^ 0x9e37_79b9_7f4a_7c15)
    }

    pub fn outer_options(&self) -> OuterOptions {
        OuterOptions {
            init: self.init,
            ..OuterOptions::from_config(&self.scenario)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserValidation {
    pub user: usize,
    pub achieved_rate: f64,
    pub target_rate: f64,
    /// `achieved_rate - target_rate`, signed.
    pub margin: f64,
    /// `-log2 det` of the averaged error covariance; never above `achieved_rate`.
    pub jensen_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamValidation {
    pub user: usize,
    pub stream: usize,
    /// Average MSE with per-sample MMSE receivers.
    pub achieved_mse: f64,
    /// `2^{-ϱ}`.
    pub target_mse: f64,
    /// `target_mse - achieved_mse`, signed; positive means the target holds.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub seed: u64,
    pub samples: usize,
    pub users: Vec<UserValidation>,
    pub streams: Vec<StreamValidation>,
    pub total_power: f64,
    pub total_power_db: f64,
    /// `|P_BC - P_MAC| / P_MAC`.
    pub duality_power_residual: f64,
    /// Largest `|stream_mse - 2^{-ϱ}|` over active streams, in sample.
    pub duality_mse_residual: f64,
}

impl ValidationReport {
    pub fn min_rate_margin(&self) -> f64 {
        self.users.iter().map(|u| u.margin).fold(f64::INFINITY, f64::min)
    }
}

pub fn power_db(power: f64) -> f64 {
    10.0 * power.log10()
}

/// Re-evaluates `solution` on `samples` fresh channel draws.
pub fn validate_solution(
    solution: &BcSolution,
    csi: &PartialCsi,
    samples: usize,
    fresh_seed: u64,
) -> Result<ValidationReport> {
    let layout = StreamLayout::new(solution.streams_per_user.clone());
    if solution.precoders.len() != csi.num_users() || solution.rho.len() != layout.total_streams() {
        return Err(Error::Dimension("solution does not match the scenario".into()));
    }
    let fresh = sample_channels(csi, samples, fresh_seed)?;
    let channels = WhitenedChannels::new(&fresh, &csi.noise_covs())?;
    let rates = mse::average_rate(&solution.precoders, &channels)?;
    let stats = mse::sigma_stats(&solution.precoders, &channels)?;
    let bounds = mse::jensen_bound(&stats);

    let users = (0..layout.users())
        .map(|k| {
            let target_rate: f64 = solution.rho[layout.range(k)].iter().sum();
            UserValidation {
                user: k,
                achieved_rate: rates[k],
                target_rate,
                margin: rates[k] - target_rate,
                jensen_bound: bounds[k],
            }
        })
        .collect();
    let streams = (0..layout.total_streams())
        .map(|a| {
            let (k, i) = layout.split(a);
            let achieved_mse = stats[k].sigma_bar[(i, i)].re;
            let target_mse = (-solution.rho[a]).exp2();
            StreamValidation {
                user: k,
                stream: i,
                achieved_mse,
                target_mse,
                margin: target_mse - achieved_mse,
            }
        })
        .collect();
    let duality_mse_residual = solution
        .stream_mse
        .iter()
        .zip(&solution.rho)
        .filter(|(_, &r)| r > 0.0)
        .map(|(&e, &r)| (e - (-r).exp2()).abs())
        .fold(0.0, f64::max);
    let duality_power_residual = if solution.mac_total_power > 0.0 {
        (solution.total_power - solution.mac_total_power).abs() / solution.mac_total_power
    } else {
        solution.total_power.abs()
    };
    Ok(ValidationReport {
        seed: fresh_seed,
        samples,
        users,
        streams,
        total_power: solution.total_power,
        total_power_db: power_db(solution.total_power),
        duality_power_residual,
        duality_mse_residual,
    })
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn stream_headers(prefix: &str, layout: &StreamLayout) -> Vec<String> {
    (0..layout.total_streams())
        .map(|a| {
            let (k, i) = layout.split(a);
            format!("{prefix}_{}_{}", k + 1, i + 1)
        })
        .collect()
}

/// Full trace: iteration, power, step data and the per-stream targets and
/// uplink powers of every accepted iteration.
pub fn trace_csv(trace: &OuterTrace, layout: &StreamLayout) -> String {
    let mut out = String::new();
    let mut header = vec![
        "iteration".to_string(),
        "total_power".into(),
        "power_db".into(),
        "step_size".into(),
        "halvings".into(),
        "inner_iterations".into(),
    ];
    header.extend(stream_headers("rho", layout));
    header.extend(stream_headers("xi", layout));
    out.push_str(&header.join(","));
    out.push('\n');
    for row in &trace.rows {
        let mut fields = vec![
            row.iteration.to_string(),
            num(row.total_power),
            num(power_db(row.total_power)),
            num(row.step_size),
            row.halvings.to_string(),
            row.inner_iterations.to_string(),
        ];
        fields.extend(row.rho.iter().map(|&x| num(x)));
        fields.extend(row.xi.iter().map(|&x| num(x)));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Per-stream targets per accepted iteration, columns `rho_k_i` (1-based).
pub fn targets_csv(trace: &OuterTrace, layout: &StreamLayout) -> String {
    let mut out = String::from("iteration,");
    out.push_str(&stream_headers("rho", layout).join(","));
    out.push('\n');
    for row in &trace.rows {
        let _ = write!(out, "{}", row.iteration);
        for &r in &row.rho {
            let _ = write!(out, ",{}", num(r));
        }
        out.push('\n');
    }
    out
}

/// Total power per accepted iteration, linear and in dB (`10 log10`).
pub fn power_csv(trace: &OuterTrace) -> String {
    let mut out = String::from("iteration,total_power,power_db\n");
    for row in &trace.rows {
        let _ = writeln!(out, "{},{},{}", row.iteration, num(row.total_power), num(power_db(row.total_power)));
    }
    out
}

/// Writes `targets.csv` and `power.csv` into `dir`.
pub fn emit_convergence_report(trace: &OuterTrace, layout: &StreamLayout, dir: &Path) -> Result<Vec<PathBuf>> {
    if trace.rows.is_empty() {
        return Err(Error::Contract("empty trace".into()));
    }
    let targets = dir.join(TARGETS_FILE);
    fs::write(&targets, targets_csv(trace, layout))?;
    let power = dir.join(POWER_FILE);
    fs::write(&power, power_csv(trace))?;
    Ok(vec![targets, power])
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_solution(path: &Path) -> Result<BcSolution> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Converged,
    /// Stopped by the step-halving or iteration cap.
    Stalled,
    Infeasible,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Converged => 0,
            RunStatus::Stalled => 2,
            RunStatus::Infeasible => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub status: RunStatus,
    pub result: Option<OuterResult>,
    pub validation: Option<ValidationReport>,
    pub feasibility: Option<FeasibilityReport>,
    pub files: Vec<PathBuf>,
}

/// Scenario, samples, outer optimization, downlink conversion and
/// validation, with all artifacts written to `config.output_dir`.
///
/// Infeasible targets are not an error: the outcome carries
/// [`RunStatus::Infeasible`] and the feasibility file is written.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
    let scenario = &config.scenario;
    let csi = build_scenario(scenario)?;
    let samples = sample_channels(&csi, scenario.samples, scenario.seed)?;
    let problem = Problem::new(scenario.layout(), &samples, &csi.noise_covs())?;
    let mut files = Vec::new();

    let result = match minimize_power(&problem, &scenario.rates, &config.outer_options(), None) {
        Ok(result) => result,
        Err(Error::Infeasible { reason, report }) => {
            info!("infeasible targets: {reason}");
            let path = dir.join(FEASIBILITY_FILE);
            write_json(&path, &report)?;
            files.push(path);
            return Ok(ExperimentOutcome {
                status: RunStatus::Infeasible,
                result: None,
                validation: None,
                feasibility: report.map(|r| *r),
                files,
            });
        }
        Err(e) => return Err(e),
    };
    let status = match result.status {
        OuterStatus::Converged => RunStatus::Converged,
        OuterStatus::Stalled | OuterStatus::IterationCap => RunStatus::Stalled,
    };

    let path = dir.join(TRACE_FILE);
    fs::write(&path, trace_csv(&result.trace, &problem.layout))?;
    files.push(path);
    if config.export.convergence {
        files.extend(emit_convergence_report(&result.trace, &problem.layout, dir)?);
    }
    if config.export.solution {
        let path = dir.join(SOLUTION_FILE);
        write_json(&path, &result.solution)?;
        files.push(path);
    }

    let state = &result.state;
    let matrix = mse::feasibility_from_moments(&state.moments, &state.xi, 0.0)?;
    let feasibility = mse::check_feasibility(&state.rho, &matrix)?;
    let path = dir.join(FEASIBILITY_FILE);
    write_json(&path, &feasibility)?;
    files.push(path);

    let validation = if config.export.validation {
        let report = validate_solution(
            &result.solution,
            &csi,
            config.effective_validation_samples(),
            config.effective_validation_seed(),
        )?;
        let path = dir.join(VALIDATION_FILE);
        write_json(&path, &report)?;
        files.push(path);
        Some(report)
    } else {
        None
    };

    Ok(ExperimentOutcome {
        status,
        result: Some(result),
        validation,
        feasibility: Some(feasibility),
        files,
    })
}

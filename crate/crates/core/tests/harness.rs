use std::fs;

use powermin::harness::{self, power_db, RunStatus};
use powermin::{build_scenario, run_experiment, validate_solution, ExperimentConfig, ScenarioConfig};

fn small_scenario() -> ScenarioConfig {
    ScenarioConfig {
        users: 2,
        tx_antennas: 4,
        rx_antennas: 3,
        streams: vec![2, 2],
        rates: vec![3.0, 2.5],
        samples: 60,
        seed: 3,
        ..ScenarioConfig::reference()
    }
}

fn small_experiment(dir: &std::path::Path) -> ExperimentConfig {
    let mut config = ExperimentConfig::new(small_scenario(), dir);
    config.validation_samples = 300;
    config
}

fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(|f| f.parse::<f64>().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn experiment_writes_consistent_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_experiment(dir.path());
    let outcome = run_experiment(&config).unwrap();
    assert_eq!(outcome.status, RunStatus::Converged);
    let result = outcome.result.as_ref().unwrap();
    for name in [
        harness::TRACE_FILE,
        harness::TARGETS_FILE,
        harness::POWER_FILE,
        harness::SOLUTION_FILE,
        harness::VALIDATION_FILE,
        harness::FEASIBILITY_FILE,
    ] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }

    let (header, rows) = parse_csv(&fs::read_to_string(dir.path().join(harness::TARGETS_FILE)).unwrap());
    assert_eq!(header, ["iteration", "rho_1_1", "rho_1_2", "rho_2_1", "rho_2_2"]);
    assert_eq!(rows.len(), result.trace.rows.len());
    for (row, trace_row) in rows.iter().zip(&result.trace.rows) {
        // Seventeen significant digits survive the text round trip exactly.
        assert_eq!(&row[1..], trace_row.rho.as_slice());
        assert!((row[1] + row[2] - 3.0).abs() < 1e-12);
        assert!((row[3] + row[4] - 2.5).abs() < 1e-12);
    }

    let (header, rows) = parse_csv(&fs::read_to_string(dir.path().join(harness::POWER_FILE)).unwrap());
    assert_eq!(header, ["iteration", "total_power", "power_db"]);
    assert!(rows.windows(2).all(|w| w[1][1] < w[0][1]));
    for row in &rows {
        assert_eq!(row[2], power_db(row[1]));
    }

    let (header, rows) = parse_csv(&fs::read_to_string(dir.path().join(harness::TRACE_FILE)).unwrap());
    assert_eq!(header.len(), 6 + 8);
    assert_eq!(rows.last().unwrap()[1], result.state.total_power);

    let feasibility = outcome.feasibility.as_ref().unwrap();
    assert!(feasibility.feasible);
}

#[test]
fn exported_solution_reproduces_validation() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_experiment(dir.path());
    let outcome = run_experiment(&config).unwrap();
    let report = outcome.validation.unwrap();

    let solution = harness::read_solution(&dir.path().join(harness::SOLUTION_FILE)).unwrap();
    assert_eq!(&solution, &outcome.result.unwrap().solution);
    let csi = build_scenario(&config.scenario).unwrap();
    let again = validate_solution(
        &solution,
        &csi,
        config.effective_validation_samples(),
        config.effective_validation_seed(),
    )
    .unwrap();
    for (a, b) in report.users.iter().zip(&again.users) {
        assert!((a.achieved_rate - b.achieved_rate).abs() < 1e-10);
    }
    assert!(report.duality_power_residual < 1e-8);
    assert!(report.duality_mse_residual < 1e-6);
    for user in &report.users {
        assert!(user.jensen_bound <= user.achieved_rate + 1e-12);
    }
}

#[test]
fn silent_precoders_miss_by_the_full_target() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_experiment(dir.path());
    let outcome = run_experiment(&config).unwrap();
    let mut solution = outcome.result.unwrap().solution;
    for f in &mut solution.precoders {
        f.fill(num_complex::Complex64::new(0.0, 0.0));
    }
    let csi = build_scenario(&config.scenario).unwrap();
    let report = validate_solution(&solution, &csi, 50, 1).unwrap();
    assert_eq!(report.min_rate_margin(), -3.0);
    for user in &report.users {
        assert_eq!(user.achieved_rate, 0.0);
    }
}

#[test]
fn config_round_trips_through_toml() {
    let mut config = ExperimentConfig::new(small_scenario(), "out/x");
    config.validation_seed = Some(17);
    config.export.solution = false;
    let text = config.to_toml_string().unwrap();
    let back = ExperimentConfig::from_toml_str(&text).unwrap();
    assert_eq!(back, config);
    assert_eq!(back.effective_validation_seed(), 17);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut config = ExperimentConfig::new(small_scenario(), "out/x");
    config.scenario.rates = vec![1.0];
    assert!(config.validate().is_err());
    assert!(ExperimentConfig::from_toml_str("output_dir = 3").is_err());
    assert!(ExperimentConfig::from_toml_str("[scenario]\nusers = 2\nbogus = 1\n").is_err());
}

#[test]
fn infeasible_targets_leave_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = ScenarioConfig {
        users: 1,
        tx_antennas: 1,
        rx_antennas: 1,
        streams: vec![1],
        rates: vec![5.0],
        samples: 200,
        ..ScenarioConfig::reference()
    };
    let outcome = run_experiment(&ExperimentConfig::new(scenario, dir.path())).unwrap();
    assert_eq!(outcome.status, RunStatus::Infeasible);
    assert_eq!(outcome.status.exit_code(), 3);
    assert!(!outcome.feasibility.unwrap().feasible);
    assert!(dir.path().join(harness::FEASIBILITY_FILE).is_file());
}

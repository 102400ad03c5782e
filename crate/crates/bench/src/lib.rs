//! Fixtures shared by the benchmarks.

use powermin::{build_scenario, sample_channels, solve_inner, InnerOptions, MacState, Problem, ScenarioConfig};

/// Two users, four transmit and three receive antennas, two streams each.
pub fn small_config(samples: usize) -> ScenarioConfig {
    ScenarioConfig {
        users: 2,
        tx_antennas: 4,
        rx_antennas: 3,
        streams: vec![2, 2],
        rates: vec![3.0, 2.5],
        samples,
        seed: 1,
        ..ScenarioConfig::reference()
    }
}

pub fn problem(config: &ScenarioConfig) -> Problem {
    let csi = build_scenario(config).expect("valid scenario");
    let samples = sample_channels(&csi, config.samples, config.seed).expect("sampling");
    Problem::new(config.layout(), &samples, &csi.noise_covs()).expect("problem")
}

/// Equal split of each user's rate.
pub fn equal_targets(config: &ScenarioConfig) -> Vec<f64> {
    config
        .streams
        .iter()
        .zip(&config.rates)
        .flat_map(|(&d, &r)| std::iter::repeat_n(r / d as f64, d))
        .collect()
}

pub fn converged(problem: &Problem, rho: &[f64]) -> MacState {
    let options = InnerOptions {
        max_iters: 5000,
        ..InnerOptions::default()
    };
    solve_inner(rho, problem, None, &options).expect("feasible targets")
}

//! Acceptance suite. Every criterion prints one PASS/FAIL line to stderr
//! (outside the test harness capture) and then asserts.
//!
//! The criteria run one at a time so that the wall-clock limits are not
//! distorted by tests competing for the CPU.

use std::f64::consts::LN_2;
use std::io::Write;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use powermin::harness::{self, RunStatus};
use powermin::inner::solve_power_allocation;
use powermin::linalg::{self, CMat, CVec, Complex64};
use powermin::mse::{self, FeasibilityReport};
use powermin::outer::{compute_jacobian, gradient_bundle, power_gradient};
use powermin::{
    build_scenario, mac_to_bc, project_per_user, run_experiment, sample_channels, solve_inner, ExperimentConfig,
    InnerOptions, MacState, Moments, PartialCsi, Problem, ScenarioConfig, StreamLayout, WhitenedChannels,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, ok: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let ok = ok && elapsed <= limit;
    let line = format!(
        "criterion {id:2} {name}: {} ({detail}; {:.2}s, limit {}s)\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{}", line.trim_end());
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(r: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = r.sample(StandardNormal);
    let im: f64 = r.sample(StandardNormal);
    linalg::c(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn random_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMat {
    CMat::from_fn(rows, cols, |_, _| gaussian(r))
}

fn small_scenario(seed: u64, samples: usize) -> ScenarioConfig {
    ScenarioConfig {
        users: 2,
        tx_antennas: 4,
        rx_antennas: 3,
        streams: vec![2, 2],
        rates: vec![3.0, 2.5],
        samples,
        seed,
        ..ScenarioConfig::reference()
    }
}

fn problem_for(config: &ScenarioConfig) -> Problem {
    let csi = build_scenario(config).unwrap();
    let samples = sample_channels(&csi, config.samples, config.seed).unwrap();
    Problem::new(config.layout(), &samples, &csi.noise_covs()).unwrap()
}

/// A split of (3, 2.5) with every stream well away from zero.
fn random_split(r: &mut ChaCha8Rng) -> Vec<f64> {
    let a: f64 = r.random_range(0.3..0.7);
    let b: f64 = r.random_range(0.3..0.7);
    vec![3.0 * a, 3.0 * (1.0 - a), 2.5 * b, 2.5 * (1.0 - b)]
}

fn converged_state(seed: u64, samples: usize) -> (Problem, MacState) {
    let problem = problem_for(&small_scenario(seed, samples));
    let rho = random_split(&mut rng(seed ^ 0x5eed));
    let options = InnerOptions {
        init_seed: seed,
        max_iters: 5000,
        ..InnerOptions::default()
    };
    let state = solve_inner(&rho, &problem, None, &options).unwrap();
    (problem, state)
}

#[test]
fn criterion_01_scalar_closed_forms() {
    let _guard = serial();
    let start = Instant::now();
    let mut csi = PartialCsi::phase_ramp(1, 1, &[0.0]).unwrap();
    csi.users[0].error_cov = CMat::zeros(1, 1);
    let samples = sample_channels(&csi, 2, 0).unwrap();
    let problem = Problem::new(StreamLayout::new(vec![1]), &samples, &csi.noise_covs()).unwrap();

    let mut worst_xi: f64 = 0.0;
    for rho in [0.25, 1.0, 2.0, 4.0] {
        let state = solve_inner(&[rho], &problem, None, &InnerOptions::default()).unwrap();
        worst_xi = worst_xi.max((state.xi[0] - (rho.exp2() - 1.0)).abs());
    }
    let unit = Moments {
        mu: vec![CVec::from_element(1, linalg::ONE)],
        theta: vec![CMat::from_element(1, 1, linalg::ONE)],
    };
    let g = vec![CVec::from_element(1, linalg::ONE)];
    let mmse = mse::mac_mmse(&g, &unit, &[3.0]).unwrap()[0];
    let state = solve_inner(&[1.0], &problem, None, &InnerOptions::default()).unwrap();
    let grad = gradient_bundle(&state).unwrap().grad[0];
    let ok = worst_xi < 1e-8 && mmse == 0.25 && (grad - 2.0 * LN_2).abs() < 1e-8;
    verdict(
        1,
        "scalar closed forms",
        ok,
        start.elapsed(),
        Duration::from_secs(1),
        &format!("max |xi - (2^rho - 1)| {worst_xi:.1e}, mmse(3) {mmse}, grad {grad:.12}"),
    );
}

#[test]
fn criterion_02_gradient_vs_finite_differences() {
    let _guard = serial();
    let start = Instant::now();
    let tight = InnerOptions {
        tol: 1e-12,
        max_iters: 5000,
        init_seed: 0,
    };
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let problem = problem_for(&small_scenario(seed, 50));
        let rho = random_split(&mut rng(seed + 100));
        let opts = InnerOptions { init_seed: seed, ..tight.clone() };
        let state = solve_inner(&rho, &problem, None, &opts).unwrap();
        let grad = gradient_bundle(&state).unwrap().grad;
        for a in 0..rho.len() {
            let mut up = rho.clone();
            let mut down = rho.clone();
            up[a] += h;
            down[a] -= h;
            let plus = solve_inner(&up, &problem, Some(&state), &opts).unwrap().total_power;
            let minus = solve_inner(&down, &problem, Some(&state), &opts).unwrap().total_power;
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max(((grad[a] - fd) / fd).abs());
        }
    }
    verdict(
        2,
        "power gradient vs central differences",
        worst < 1e-3,
        start.elapsed(),
        Duration::from_secs(120),
        &format!("20 instances, worst relative error {worst:.2e}"),
    );
}

#[test]
fn criterion_03_m_matrix_structure() {
    let _guard = serial();
    let start = Instant::now();
    let mut failures = Vec::new();
    for seed in 0..100u64 {
        let (_, state) = converged_state(1000 + seed, 30);
        let j = compute_jacobian(&state).unwrap();
        let v = state.virtual_xi();
        let d = v.len();
        let mut ok = true;
        for a in 0..d {
            ok &= -j[(a, a)] > 0.0;
            let mut off = 0.0;
            for b in 0..d {
                if b != a {
                    ok &= -j[(a, b)] <= 0.0;
                    off += (j[(a, b)] * v[b]).abs();
                }
            }
            ok &= -j[(a, a)] * v[a] > off;
        }
        ok &= power_gradient(&j, &state.rho).unwrap().iter().all(|&g| g > 0.0);
        if !ok {
            failures.push(seed);
        }
    }
    verdict(
        3,
        "Jacobian M-matrix structure",
        failures.is_empty(),
        start.elapsed(),
        Duration::from_secs(120),
        &format!("100 states, failing seeds {failures:?}"),
    );
}

/// Exact projection by enumerating supports and keeping the closest
/// nonnegative candidate.
fn projection_oracle(x: &[f64], total: f64) -> Vec<f64> {
    let n = x.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let level = (support.iter().map(|&i| x[i]).sum::<f64>() - total) / support.len() as f64;
        let mut cand = vec![0.0; n];
        for &i in &support {
            cand[i] = x[i] - level;
        }
        if cand.iter().any(|&c| c < 0.0) {
            continue;
        }
        let dist: f64 = cand.iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, cand));
        }
    }
    best.expect("some support is always feasible").1
}

#[test]
fn criterion_04_projection_oracle() {
    let _guard = serial();
    let start = Instant::now();
    let mut r = rng(4);
    let mut cases: Vec<(Vec<f64>, f64)> = vec![(vec![5.0, 0.2, 0.2], 3.0), (vec![3.0, 1.0], 2.0)];
    while cases.len() < 1000 {
        let n = r.random_range(1..=6);
        let x = (0..n).map(|_| r.random_range(-4.0..8.0)).collect();
        cases.push((x, r.random_range(0.0..10.0)));
    }
    let mut worst: f64 = 0.0;
    for (x, total) in &cases {
        let got = project_per_user(x, *total);
        let want = projection_oracle(x, *total);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    let clipped = project_per_user(&[5.0, 0.2, 0.2], 3.0);
    verdict(
        4,
        "simplex projection vs exact oracle",
        worst < 1e-9 && clipped == [3.0, 0.0, 0.0],
        start.elapsed(),
        Duration::from_secs(10),
        &format!("1000 cases, max deviation {worst:.1e}, (5,0.2,0.2)->{clipped:?}"),
    );
}

/// Standard interference function for fixed receivers, iterated from zero.
fn interference_fixed_point(g: &[CVec], m: &Moments, targets: &[f64]) -> Vec<f64> {
    let d = g.len();
    let mut xi = vec![0.0; d];
    for _ in 0..1_000_000 {
        let next: Vec<f64> = (0..d)
            .map(|a| {
                let slack = 1.0 - targets[a];
                let gain = g[a].dotc(&m.mu[a]).norm_sqr();
                let leak = |b: usize| g[a].dotc(&(&m.theta[b] * &g[a])).re;
                let interference: f64 =
                    (0..d).filter(|&b| b != a).map(|b| xi[b] * leak(b)).sum::<f64>() + g[a].norm_squared();
                slack * interference / (gain - slack * leak(a))
            })
            .collect();
        let change = next.iter().zip(&xi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        xi = next;
        if change < 1e-14 {
            break;
        }
    }
    xi
}

#[test]
fn criterion_05_power_allocation_oracle() {
    let _guard = serial();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut r = rng(5);
    for seed in 0..100u64 {
        let (_, state) = converged_state(2000 + seed, 20);
        // Looser targets than the state's, so the instance is not its own fixed point.
        let targets: Vec<f64> = state.targets().iter().map(|t| t + r.random_range(0.0..0.5) * (1.0 - t)).collect();
        let xi = solve_power_allocation(&state.g_tilde, &state.moments, &targets).unwrap();
        let oracle = interference_fixed_point(&state.g_tilde, &state.moments, &targets);
        for (a, b) in xi.iter().zip(&oracle) {
            worst = worst.max((a - b).abs() / b.max(1.0));
        }
    }
    verdict(
        5,
        "linear power allocation vs interference iteration",
        worst < 1e-8,
        start.elapsed(),
        Duration::from_secs(30),
        &format!("100 instances, max deviation {worst:.1e}"),
    );
}

/// Average downlink MSE per stream, evaluated sample by sample with the
/// scaled dual receivers.
fn downlink_stream_mse(problem: &Problem, state: &MacState, bc: &powermin::BcSolution) -> Vec<f64> {
    let layout = &problem.layout;
    let users = layout.users();
    let count = problem.channels.count();
    let eye = linalg::identity(problem.channels.rx_antennas);
    let noise = vec![eye; users];
    let mut acc = vec![0.0; layout.total_streams()];
    for m in 0..count {
        let channels: Vec<CMat> = (0..users).map(|k| problem.channels.channels[k][m].clone()).collect();
        let receivers: Vec<CMat> = (0..users)
            .map(|k| {
                let cols: Vec<CVec> = layout.range(k).map(|a| &state.tau[a][m] * bc.receiver_scale[a]).collect();
                CMat::from_columns(&cols)
            })
            .collect();
        let per = mse::bc_mse_per_stream(&bc.precoders, &receivers, &channels, &noise).unwrap();
        for (a, slot) in acc.iter_mut().enumerate() {
            let (k, i) = layout.split(a);
            *slot += per[k][i];
        }
    }
    acc.iter().map(|s| s / count as f64).collect()
}

#[test]
fn criterion_06_duality_conservation() {
    let _guard = serial();
    let start = Instant::now();
    let mut worst_power: f64 = 0.0;
    let mut worst_mse: f64 = 0.0;
    for seed in 0..50u64 {
        let (problem, state) = converged_state(3000 + seed, 30);
        let bc = mac_to_bc(&state, &problem).unwrap();
        let radiated: f64 = bc.precoders.iter().map(|f| f.norm_squared()).sum();
        worst_power = worst_power.max((radiated - state.total_power).abs() / state.total_power);
        for (down, up) in downlink_stream_mse(&problem, &state, &bc).iter().zip(&state.achieved_mmse) {
            worst_mse = worst_mse.max((down - up).abs());
        }
    }
    verdict(
        6,
        "uplink/downlink conversion",
        worst_power < 1e-8 && worst_mse < 1e-6,
        start.elapsed(),
        Duration::from_secs(120),
        &format!("50 instances, power rel {worst_power:.1e}, MSE {worst_mse:.1e}"),
    );
}

fn random_channels(r: &mut ChaCha8Rng, users: usize, n: usize, rx: usize, count: usize) -> WhitenedChannels {
    WhitenedChannels {
        tx_antennas: n,
        rx_antennas: rx,
        channels: (0..users)
            .map(|_| (0..count).map(|_| random_mat(r, n, rx)).collect())
            .collect(),
    }
}

#[test]
fn criterion_07_rate_identities_and_jensen() {
    let _guard = serial();
    let start = Instant::now();
    let mut r = rng(7);
    let mut worst_identity: f64 = 0.0;
    let mut jensen_violations = 0;
    let mut worst_single: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(2..=5);
        let rx = r.random_range(1..=3);
        let streams: Vec<usize> = (0..2).map(|_| r.random_range(1..=rx)).collect();
        let precoders: Vec<CMat> = streams.iter().map(|&d| random_mat(&mut r, n, d)).collect();
        let channels = random_channels(&mut r, 2, n, rx, 30);
        for k in 0..2 {
            for h in &channels.channels[k] {
                let (det_form, sigma_form) = mse::rate_forms(&precoders, k, h).unwrap();
                worst_identity = worst_identity.max((det_form - sigma_form).abs());
            }
        }
        let rates = mse::average_rate(&precoders, &channels).unwrap();
        let bounds = mse::jensen_bound(&mse::sigma_stats(&precoders, &channels).unwrap());
        jensen_violations += rates.iter().zip(&bounds).filter(|&(r, b)| *b > *r + 1e-12).count();

        let single = random_channels(&mut r, 2, n, rx, 1);
        let rates = mse::average_rate(&precoders, &single).unwrap();
        let bounds = mse::jensen_bound(&mse::sigma_stats(&precoders, &single).unwrap());
        for (a, b) in rates.iter().zip(&bounds) {
            worst_single = worst_single.max((a - b).abs());
        }
    }
    verdict(
        7,
        "rate identities and Jensen bound",
        worst_identity < 1e-8 && jensen_violations == 0 && worst_single < 1e-8,
        start.elapsed(),
        Duration::from_secs(60),
        &format!(
            "identity gap {worst_identity:.1e}, bound violations {jensen_violations}, M=1 gap {worst_single:.1e}"
        ),
    );
}

#[test]
fn criterion_08_reference_scenario() {
    let _guard = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig::new(ScenarioConfig::reference(), dir.path());
    let outcome = run_experiment(&config).unwrap();
    let result = outcome.result.as_ref().expect("reference scenario is feasible");
    let layout = config.scenario.layout();
    let rates = &config.scenario.rates;

    let powers = result.trace.powers();
    let decreasing = powers.windows(2).all(|w| w[1] < w[0]);
    let sums_exact = result.trace.rows.iter().all(|row| {
        (0..layout.users()).all(|k| {
            let sum: f64 = row.rho[layout.range(k)].iter().sum();
            (sum - rates[k]).abs() <= 1e-12 * rates[k]
        })
    });
    let report = outcome.validation.as_ref().unwrap();
    let margin = report.min_rate_margin();
    let iterations = result.trace.accepted_iterations();
    let achieved: Vec<String> = report.users.iter().map(|u| format!("{:.3}", u.achieved_rate)).collect();
    verdict(
        8,
        "reference two-user scenario",
        outcome.status == RunStatus::Converged && decreasing && sums_exact && iterations <= 30 && margin >= -0.05,
        start.elapsed(),
        Duration::from_secs(600),
        &format!(
            "{:?} after {iterations} accepted iterations, {:.3} dB -> {:.3} dB, out-of-sample rates [{}]",
            outcome.status,
            harness::power_db(powers[0]),
            harness::power_db(*powers.last().unwrap()),
            achieved.join(", ")
        ),
    );
}

fn scalar_bound(error_var: f64) -> FeasibilityReport {
    let moments = Moments {
        mu: vec![CVec::from_element(1, linalg::ONE)],
        theta: vec![CMat::from_element(1, 1, linalg::c(1.0 + error_var, 0.0))],
    };
    let matrix = mse::feasibility_from_moments(&moments, &[1.0], 0.0).unwrap();
    mse::check_feasibility(&[1.0], &matrix).unwrap()
}

#[test]
fn criterion_09_feasibility() {
    let _guard = serial();
    let start = Instant::now();
    let mut worst_closed: f64 = 0.0;
    for error_var in [0.01, 0.3, 1.0, 2.5, 10.0] {
        let report = scalar_bound(error_var);
        worst_closed = worst_closed.max((report.bound_rhs - error_var / (1.0 + error_var)).abs());
    }

    // Same Σ 2^{-ϱ}, different splits, on converged moments.
    let mut split_mismatch = 0;
    for seed in 0..20u64 {
        let (_, state) = converged_state(4000 + seed, 20);
        let matrix = mse::feasibility_from_moments(&state.moments, &state.xi, 0.0).unwrap();
        for total in [matrix.bound_rhs * 0.9, matrix.bound_rhs * 1.1 + 0.01] {
            let mut verdicts = Vec::new();
            for share in [0.1, 0.25, 0.4] {
                // Spread `total` over four MSE targets in (0, 1].
                let weights = [share, 0.5 - share, 0.25, 0.25];
                let rho: Vec<f64> = weights.iter().map(|w| -(w * total).min(1.0).log2()).collect();
                let lhs: f64 = rho.iter().map(|r| (-r).exp2()).sum();
                if (lhs - total).abs() > 1e-12 {
                    continue;
                }
                verdicts.push(mse::check_feasibility(&rho, &matrix).unwrap().feasible);
            }
            if verdicts.windows(2).any(|w| w[0] != w[1]) {
                split_mismatch += 1;
            }
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/infeasible.toml");
    let status = Command::new(env!("CARGO_BIN_EXE_powermin"))
        .args(["--config", config, "--out"])
        .arg(dir.path())
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
        .status;
    let code = status.code();
    verdict(
        9,
        "feasibility test",
        worst_closed < 1e-10 && split_mismatch == 0 && code == Some(3),
        start.elapsed(),
        Duration::from_secs(10),
        &format!("closed-form error {worst_closed:.1e}, split mismatches {split_mismatch}, exit code {code:?}"),
    );
}

#[test]
fn criterion_10_determinism() {
    let _guard = serial();
    let start = Instant::now();
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/small.toml");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let status = Command::new(env!("CARGO_BIN_EXE_powermin"))
            .args(["--config", config, "--out"])
            .arg(dir.path())
            .env("RUST_LOG", "off")
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let files = [
        harness::TRACE_FILE,
        harness::TARGETS_FILE,
        harness::POWER_FILE,
        harness::SOLUTION_FILE,
        harness::VALIDATION_FILE,
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|name| {
            let a = std::fs::read(dirs[0].path().join(name)).unwrap();
            let b = std::fs::read(dirs[1].path().join(name)).unwrap();
            a != b
        })
        .collect();
    verdict(
        10,
        "byte-identical repeated runs",
        differing.is_empty(),
        start.elapsed(),
        Duration::from_secs(120),
        &format!("compared {} files, differing {differing:?}", files.len()),
    );
}

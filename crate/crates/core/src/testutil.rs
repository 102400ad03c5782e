//! Random instances shared by the unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{build_scenario, sample_channels, PartialCsi, ScenarioConfig, WhitenedChannels};
use crate::inner::Problem;
use crate::layout::StreamLayout;
use crate::linalg::{CMat, CVec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn cmat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMat {
    CMat::from_fn(rows, cols, |_, _| crate::channel::complex_gaussian(rng))
}

pub fn cvec(rng: &mut ChaCha8Rng, n: usize) -> CVec {
    CVec::from_fn(n, |_, _| crate::channel::complex_gaussian(rng))
}

pub fn unit(rng: &mut ChaCha8Rng, n: usize) -> CVec {
    let v = cvec(rng, n);
    let norm = v.norm();
    v.unscale(norm)
}

/// Hermitian positive definite `n x n` with eigenvalues at least 1.
pub fn hpd(rng: &mut ChaCha8Rng, n: usize) -> CMat {
    let a = cmat(rng, n, n);
    &a * a.adjoint() + crate::linalg::identity(n)
}

/// Two users, 4 transmit and 3 receive antennas, two streams each.
pub fn small_config(seed: u64, samples: usize) -> ScenarioConfig {
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

pub fn problem(config: &ScenarioConfig) -> Problem {
    let csi = build_scenario(config).unwrap();
    let samples = sample_channels(&csi, config.samples, config.seed).unwrap();
    Problem::new(config.layout(), &samples, &csi.noise_covs()).unwrap()
}

pub fn whitened(config: &ScenarioConfig, samples: usize, seed: u64) -> WhitenedChannels {
    let csi = build_scenario(config).unwrap();
    let set = sample_channels(&csi, samples, seed).unwrap();
    WhitenedChannels::new(&set, &csi.noise_covs()).unwrap()
}

/// Perfect CSI, one antenna on each side, `|h| = 1`.
pub fn scalar_problem() -> Problem {
    let mut csi = PartialCsi::phase_ramp(1, 1, &[0.0]).unwrap();
    csi.users[0].error_cov = CMat::zeros(1, 1);
    let samples = sample_channels(&csi, 4, 0).unwrap();
    Problem::new(StreamLayout::new(vec![1]), &samples, &csi.noise_covs()).unwrap()
}

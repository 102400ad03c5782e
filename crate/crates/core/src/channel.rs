//! Scenario description, the stochastic CSI error model and Monte Carlo
//! channel moments.
//!
//! The transmitter knows each user's channel only through a conditional
//! Gaussian model `H_k = H̄_k + H̃_k`, where the columns of `H̃_k` are
//! i.i.d. circularly symmetric Gaussian with covariance `C_err_k`. Every
//! conditional expectation in the solver is a sample average over one fixed
//! [`ChannelSampleSet`].

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::StreamLayout;
use crate::linalg::{self, c, CMat, CVec};

/// RNG stream ids derived from one scenario seed.
pub(crate) mod rng_stream {
    pub const SCENARIO: u64 = 0;
    pub const CHANNELS: u64 = 1;
    pub const FILTER_INIT: u64 = 2;
    pub const RANDOM_SPLIT: u64 = 3;
}

pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One draw of `CN(0, 1)`.
pub(crate) fn complex_gaussian<R: Rng>(rng: &mut R) -> num_complex::Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    c(re * std::f64::consts::FRAC_1_SQRT_2, im * std::f64::consts::FRAC_1_SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Number of users `K`.
    pub users: usize,
    /// Transmit antennas `N` at the base station.
    pub tx_antennas: usize,
    /// Receive antennas `R` per user.
    pub rx_antennas: usize,
    /// Streams `d_k` per user.
    pub streams: Vec<usize>,
    /// Target average rate `rho_k` per user, bits per channel use.
    pub rates: Vec<f64>,
    /// Monte Carlo sample count `M`.
    pub samples: usize,
    /// Initial outer step size `s0`.
    #[serde(default = "defaults::step_size")]
    pub step_size: f64,
    /// Outer stopping threshold on the power improvement.
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::max_outer_iters")]
    pub max_outer_iters: usize,
    #[serde(default = "defaults::max_step_halvings")]
    pub max_step_halvings: usize,
    /// Absolute tolerance on the inner-loop total power.
    #[serde(default = "defaults::inner_tol")]
    pub inner_tol: f64,
}

mod defaults {
    pub fn step_size() -> f64 {
        2.0
    }
    pub fn gamma() -> f64 {
        1e-5
    }
    pub fn max_outer_iters() -> usize {
        100
    }
    pub fn max_step_halvings() -> usize {
        40
    }
    pub fn inner_tol() -> f64 {
        1e-8
    }
}

impl ScenarioConfig {
    /// Two users, 8 transmit and 6 receive antennas, four streams each,
    /// rates 8.5 and 7.5 bits, 1000 channel samples.
    pub fn reference() -> Self {
        Self {
            users: 2,
            tx_antennas: 8,
            rx_antennas: 6,
            streams: vec![4, 4],
            rates: vec![8.5, 7.5],
            samples: 1000,
            step_size: defaults::step_size(),
            gamma: defaults::gamma(),
            seed: 1,
            max_outer_iters: defaults::max_outer_iters(),
            max_step_halvings: defaults::max_step_halvings(),
            inner_tol: defaults::inner_tol(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.users == 0 {
            return bad("users must be at least 1".into());
        }
        if self.tx_antennas == 0 || self.rx_antennas == 0 {
            return bad("antenna counts must be at least 1".into());
        }
        if self.streams.len() != self.users || self.rates.len() != self.users {
            return bad(format!(
                "expected {} entries in streams and rates, got {} and {}",
                self.users,
                self.streams.len(),
                self.rates.len()
            ));
        }
        let cap = self.tx_antennas.min(self.rx_antennas);
        for (k, &dk) in self.streams.iter().enumerate() {
            if dk == 0 || dk > cap {
                return bad(format!("user {k}: stream count {dk} outside 1..={cap}"));
            }
        }
        for (k, &rk) in self.rates.iter().enumerate() {
            if !(rk > 0.0 && rk.is_finite()) {
                return bad(format!("user {k}: rate {rk} must be positive"));
            }
        }
        if self.samples == 0 {
            return bad("samples must be at least 1".into());
        }
        if !(self.step_size > 0.0) || !(self.gamma > 0.0) || !(self.inner_tol > 0.0) {
            return bad("step_size, gamma and inner_tol must be positive".into());
        }
        if self.max_outer_iters == 0 || self.max_step_halvings == 0 {
            return bad("iteration caps must be positive".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> StreamLayout {
        StreamLayout::new(self.streams.clone())
    }
}

/// Statistical channel knowledge of one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCsi {
    /// Channel mean `E[H_k | v]`, `N x R`.
    pub mean: CMat,
    /// Column covariance of the channel error, `N x N`, Hermitian PSD.
    pub error_cov: CMat,
    /// Receiver noise covariance, `R x R`, Hermitian PD.
    pub noise_cov: CMat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialCsi {
    pub tx_antennas: usize,
    pub rx_antennas: usize,
    pub users: Vec<UserCsi>,
}

impl PartialCsi {
    pub fn new(users: Vec<UserCsi>) -> Result<Self> {
        let first = users
            .first()
            .ok_or_else(|| Error::Config("at least one user is required".into()))?;
        let (n, r) = first.mean.shape();
        for (k, u) in users.iter().enumerate() {
            if u.mean.shape() != (n, r) || u.error_cov.shape() != (n, n) || u.noise_cov.shape() != (r, r) {
                return Err(Error::Dimension(format!("user {k}: inconsistent CSI shapes")));
            }
            if !linalg::is_hermitian(&u.error_cov, 1e-10)
                || linalg::min_eigenvalue(&u.error_cov) < -1e-10 * linalg::real_trace(&u.error_cov).max(1.0)
            {
                return Err(Error::Numeric(format!("user {k}: error covariance is not Hermitian PSD")));
            }
            if !linalg::is_hermitian(&u.noise_cov, 1e-10) || linalg::min_eigenvalue(&u.noise_cov) <= 0.0 {
                return Err(Error::Numeric(format!("user {k}: noise covariance is not Hermitian PD")));
            }
        }
        Ok(Self {
            tx_antennas: n,
            rx_antennas: r,
            users,
        })
    }

    /// Mean channels whose columns are all the phase ramp `e^{j n phi_k}`,
    /// error covariance `R * I_N` and white unit noise.
    pub fn phase_ramp(tx: usize, rx: usize, phases: &[f64]) -> Result<Self> {
        let users = phases
            .iter()
            .map(|&phi| UserCsi {
                mean: CMat::from_fn(tx, rx, |n, _| num_complex::Complex64::from_polar(1.0, n as f64 * phi)),
                error_cov: linalg::identity(tx).scale(rx as f64),
                noise_cov: linalg::identity(rx),
            })
            .collect();
        Self::new(users)
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn noise_covs(&self) -> Vec<CMat> {
        self.users.iter().map(|u| u.noise_cov.clone()).collect()
    }
}

/// Instantiates the reference CSI model: uniform random phase per user.
pub fn build_scenario(config: &ScenarioConfig) -> Result<PartialCsi> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed, rng_stream::SCENARIO);
    let phases: Vec<f64> = (0..config.users).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    PartialCsi::phase_ramp(config.tx_antennas, config.rx_antennas, &phases)
}

/// `M` channel realizations per user, drawn once and reused for a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSampleSet {
    pub seed: u64,
    pub tx_antennas: usize,
    pub rx_antennas: usize,
    /// `samples[k][m]` is realization `m` of user `k`.
    pub samples: Vec<Vec<CMat>>,
}

impl ChannelSampleSet {
    pub fn count(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn users(&self) -> usize {
        self.samples.len()
    }

    /// Sample mean of user `k`'s realizations.
    pub fn sample_mean(&self, user: usize) -> CMat {
        let set = &self.samples[user];
        let mut acc = CMat::zeros(self.tx_antennas, self.rx_antennas);
        for h in set {
            acc += h;
        }
        acc.unscale(set.len() as f64)
    }

    /// Writes a plain-text archive: a header with the dimensions, then one
    /// line per matrix row holding `re im` pairs in row-major order.
    pub fn write_archive<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "powermin-channels 1 users {} samples {} tx {} rx {} seed {}",
            self.users(),
            self.count(),
            self.tx_antennas,
            self.rx_antennas,
            self.seed
        )?;
        let mut line = String::new();
        for user in &self.samples {
            for h in user {
                for i in 0..h.nrows() {
                    line.clear();
                    for j in 0..h.ncols() {
                        let z = h[(i, j)];
                        if j > 0 {
                            line.push(' ');
                        }
                        let _ = write!(line, "{:.16e} {:.16e}", z.re, z.im);
                    }
                    writeln!(out, "{line}")?;
                }
            }
        }
        Ok(())
    }

    pub fn read_archive<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty channel archive".into()))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 12 || fields[0] != "powermin-channels" || fields[1] != "1" {
            return Err(Error::Format(format!("unrecognized archive header: {header}")));
        }
        let num = |idx: usize, name: &str| -> Result<u64> {
            if fields[idx] != name {
                return Err(Error::Format(format!("expected `{name}` in archive header")));
            }
            fields[idx + 1]
                .parse::<u64>()
                .map_err(|e| Error::Format(format!("bad {name}: {e}")))
        };
        let users = num(2, "users")? as usize;
        let count = num(4, "samples")? as usize;
        let tx = num(6, "tx")? as usize;
        let rx = num(8, "rx")? as usize;
        let seed = num(10, "seed")?;

        let mut samples = Vec::with_capacity(users);
        for _ in 0..users {
            let mut per_user = Vec::with_capacity(count);
            for _ in 0..count {
                let mut h = CMat::zeros(tx, rx);
                for i in 0..tx {
                    let line = lines
                        .next()
                        .ok_or_else(|| Error::Format("truncated channel archive".into()))??;
                    let values: Vec<f64> = line
                        .split_whitespace()
                        .map(|t| t.parse::<f64>().map_err(|e| Error::Format(e.to_string())))
                        .collect::<Result<_>>()?;
                    if values.len() != 2 * rx {
                        return Err(Error::Format(format!(
                            "expected {} values per row, found {}",
                            2 * rx,
                            values.len()
                        )));
                    }
                    for j in 0..rx {
                        h[(i, j)] = c(values[2 * j], values[2 * j + 1]);
                    }
                }
                per_user.push(h);
            }
            samples.push(per_user);
        }
        Ok(Self {
            seed,
            tx_antennas: tx,
            rx_antennas: rx,
            samples,
        })
    }
}

/// Draws `count` realizations per user. Deterministic in `seed`; users are
/// drawn in order, realizations in ascending index, entries column by column.
pub fn sample_channels(csi: &PartialCsi, count: usize, seed: u64) -> Result<ChannelSampleSet> {
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let (n, r) = (csi.tx_antennas, csi.rx_antennas);
    let mut rng = seeded_rng(seed, rng_stream::CHANNELS);
    let samples = csi
        .users
        .iter()
        .map(|user| {
            let root = linalg::psd_sqrt(&user.error_cov);
            (0..count)
                .map(|_| {
                    let mut z = CMat::zeros(n, r);
                    for j in 0..r {
                        for i in 0..n {
                            z[(i, j)] = complex_gaussian(&mut rng);
                        }
                    }
                    &user.mean + &root * z
                })
                .collect()
        })
        .collect();
    Ok(ChannelSampleSet {
        seed,
        tx_antennas: n,
        rx_antennas: r,
        samples,
    })
}

/// `H C_eta^{-1/2}` with the Hermitian inverse square root, i.e. the channel
/// seen after whitening the receiver noise.
pub fn whiten_channel(h: &CMat, noise_cov: &CMat) -> Result<CMat> {
    if noise_cov.nrows() != h.ncols() {
        return Err(Error::Dimension(format!(
            "channel has {} columns but noise covariance is {}x{}",
            h.ncols(),
            noise_cov.nrows(),
            noise_cov.ncols()
        )));
    }
    Ok(h * linalg::pd_inv_sqrt(noise_cov)?)
}

/// Noise-whitened realizations, cached once per run.
#[derive(Debug, Clone)]
pub struct WhitenedChannels {
    pub tx_antennas: usize,
    pub rx_antennas: usize,
    /// `channels[k][m]`, each `N x R`.
    pub channels: Vec<Vec<CMat>>,
}

impl WhitenedChannels {
    pub fn new(samples: &ChannelSampleSet, noise_covs: &[CMat]) -> Result<Self> {
        if noise_covs.len() != samples.users() {
            return Err(Error::Dimension("one noise covariance per user is required".into()));
        }
        let channels = samples
            .samples
            .iter()
            .zip(noise_covs)
            .map(|(set, cov)| {
                let w = linalg::pd_inv_sqrt(cov)?;
                Ok(set.iter().map(|h| h * &w).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tx_antennas: samples.tx_antennas,
            rx_antennas: samples.rx_antennas,
            channels,
        })
    }

    pub fn count(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn users(&self) -> usize {
        self.channels.len()
    }
}

/// First and second moments of the effective stream channels
/// `W_k τ_{k,i}` in the dual uplink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mu: Vec<CVec>,
    pub theta: Vec<CMat>,
}

/// Per-stream, per-sample unit-norm uplink precoders: `tau[a][m]`.
pub type StreamPrecoders = Vec<Vec<CVec>>;

const UNIT_NORM_TOL: f64 = 1e-9;

/// Moment estimation from raw samples; whitens with `noise_covs` first.
pub fn estimate_moments(
    samples: &ChannelSampleSet,
    tau: &StreamPrecoders,
    layout: &StreamLayout,
    noise_covs: &[CMat],
) -> Result<Moments> {
    let whitened = WhitenedChannels::new(samples, noise_covs)?;
    moments_from_whitened(&whitened, tau, layout)
}

/// Sample averages `mu = (1/M) Σ W τ` and `Theta = (1/M) Σ W τ τ^H W^H`,
/// reduced sequentially in ascending sample order.
pub fn moments_from_whitened(
    channels: &WhitenedChannels,
    tau: &StreamPrecoders,
    layout: &StreamLayout,
) -> Result<Moments> {
    let count = channels.count();
    if tau.len() != layout.total_streams() {
        return Err(Error::Dimension(format!(
            "{} precoder sets for {} streams",
            tau.len(),
            layout.total_streams()
        )));
    }
    let n = channels.tx_antennas;
    let mut mu = Vec::with_capacity(tau.len());
    let mut theta = Vec::with_capacity(tau.len());
    for (a, per_sample) in tau.iter().enumerate() {
        if per_sample.len() != count {
            return Err(Error::Dimension(format!(
                "stream {a}: {} precoders for {count} samples",
                per_sample.len()
            )));
        }
        let user = layout.user_of(a);
        let mut m1 = CVec::zeros(n);
        let mut m2 = CMat::zeros(n, n);
        for (w, t) in channels.channels[user].iter().zip(per_sample) {
            let dev = (t.norm() - 1.0).abs();
            if dev > UNIT_NORM_TOL {
                return Err(Error::Contract(format!(
                    "stream {a}: precoder norm deviates from one by {dev:e}"
                )));
            }
            let v = w * t;
            m2.gerc(linalg::ONE, &v, &v, linalg::ONE);
            m1 += v;
        }
        let inv = 1.0 / count as f64;
        mu.push(m1.scale(inv));
        theta.push(m2.scale(inv));
    }
    Ok(Moments { mu, theta })
}

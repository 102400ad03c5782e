//! MSE and rate algebra for the downlink and its dual uplink.
//!
//! Downlink quantities (`bc_*`, [`sigma_stats`], [`average_rate`]) are
//! evaluated per channel realization and averaged. Uplink quantities work on
//! the [`Moments`] of the effective stream channels: with unit-norm receive
//! filters `g̃_a`, stream `a` sees the gain `c_a = |g̃_a^H μ_a|^2`, the
//! cross terms `θ_ab = g̃_a^H Θ_b g̃_a` and the noise `‖g̃_a‖^2`, and its
//! minimum average MSE is `1 - ξ_a c_a / y_a` with
//! `y_a = Σ_b ξ_b θ_ab + ‖g̃_a‖^2`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channel::{moments_from_whitened, Moments, StreamPrecoders, WhitenedChannels};
use crate::error::{Error, Result};
use crate::layout::StreamLayout;
use crate::linalg::{self, CMat, CVec};

/// Downlink precoders `P_k` (`N x d_k`) and receivers `F_k` (`R x d_k`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcFilters {
    pub precoders: Vec<CMat>,
    pub receivers: Vec<CMat>,
}

/// Concatenates per-user precoders into one `N x d` matrix.
pub fn stack_precoders(precoders: &[CMat]) -> CMat {
    let n = precoders.first().map_or(0, |p| p.nrows());
    let d: usize = precoders.iter().map(|p| p.ncols()).sum();
    let mut out = CMat::zeros(n, d);
    let mut col = 0;
    for p in precoders {
        out.view_mut((0, col), (n, p.ncols())).copy_from(p);
        col += p.ncols();
    }
    out
}

fn check_bc_dims(precoders: &[CMat], receivers: &[CMat], channels: &[CMat], noise_covs: &[CMat]) -> Result<()> {
    let k = precoders.len();
    if receivers.len() != k || channels.len() != k || noise_covs.len() != k {
        return Err(Error::Dimension("one precoder, receiver, channel and noise covariance per user".into()));
    }
    for u in 0..k {
        let (n, r) = channels[u].shape();
        if precoders[u].nrows() != n
            || receivers[u].nrows() != r
            || receivers[u].ncols() != precoders[u].ncols()
            || noise_covs[u].shape() != (r, r)
        {
            return Err(Error::Dimension(format!("user {u}: filter shapes do not match the channel")));
        }
    }
    Ok(())
}

/// Downlink MSE `E‖s_k - ŝ_k‖^2` of every user for one channel realization.
pub fn bc_mse(precoders: &[CMat], receivers: &[CMat], channels: &[CMat], noise_covs: &[CMat]) -> Result<Vec<f64>> {
    check_bc_dims(precoders, receivers, channels, noise_covs)?;
    let mut out = Vec::with_capacity(precoders.len());
    for k in 0..precoders.len() {
        let fh_hh = receivers[k].adjoint() * channels[k].adjoint();
        let dk = precoders[k].ncols() as f64;
        let mut mse = dk - 2.0 * linalg::real_trace(&(&fh_hh * &precoders[k]));
        for p in precoders {
            mse += linalg::frobenius_sq(&(&fh_hh * p));
        }
        mse += linalg::real_trace(&(receivers[k].adjoint() * &noise_covs[k] * &receivers[k]));
        out.push(mse.max(0.0));
    }
    Ok(out)
}

/// Per-stream split of [`bc_mse`]: `out[k][i]` is the MSE of stream `i` of user `k`.
pub fn bc_mse_per_stream(
    precoders: &[CMat],
    receivers: &[CMat],
    channels: &[CMat],
    noise_covs: &[CMat],
) -> Result<Vec<Vec<f64>>> {
    check_bc_dims(precoders, receivers, channels, noise_covs)?;
    let all = stack_precoders(precoders);
    let mut out = Vec::with_capacity(precoders.len());
    let mut offset = 0;
    for k in 0..precoders.len() {
        let fh_hh_p = receivers[k].adjoint() * channels[k].adjoint() * &all;
        let noise = receivers[k].adjoint() * &noise_covs[k] * &receivers[k];
        let per_stream = (0..precoders[k].ncols())
            .map(|i| {
                let row = fh_hh_p.row(i);
                let cross: f64 = row.iter().map(|z| z.norm_sqr()).sum();
                1.0 - 2.0 * row[offset + i].re + cross + noise[(i, i)].re
            })
            .collect();
        out.push(per_stream);
        offset += precoders[k].ncols();
    }
    Ok(out)
}

/// Linear MMSE receiver of user `k` for one realization:
/// `(H^H P P^H H + C_eta)^{-1} H^H P_k` with `P` stacking every user's precoder.
pub fn bc_mmse_receiver(precoders: &[CMat], user: usize, channel: &CMat, noise_cov: &CMat) -> Result<CMat> {
    let all = stack_precoders(precoders);
    if all.nrows() != channel.nrows() || noise_cov.shape() != (channel.ncols(), channel.ncols()) {
        return Err(Error::Dimension("receiver inputs have inconsistent shapes".into()));
    }
    let hh = channel.adjoint();
    let hp = &hh * &all;
    let cov = &hp * hp.adjoint() + noise_cov;
    linalg::hpd_solve(&cov, &(&hh * &precoders[user]))
}

/// Error covariance `Σ_k = (I + P_k^H W X^{-1} W^H P_k)^{-1}` of user `k` for
/// one whitened realization `W`, where `X = I + W^H Σ_{i≠k} P_i P_i^H W`.
pub fn sigma_matrix(precoders: &[CMat], user: usize, whitened: &CMat) -> Result<CMat> {
    let r = whitened.ncols();
    let wh = whitened.adjoint();
    let mut x = linalg::identity(r);
    for (i, p) in precoders.iter().enumerate() {
        if i != user {
            let wp = &wh * p;
            x += &wp * wp.adjoint();
        }
    }
    let own = &wh * &precoders[user];
    let gram = own.adjoint() * linalg::hpd_solve(&x, &own)?;
    linalg::hpd_inverse(&(linalg::identity(precoders[user].ncols()) + gram))
}

/// Averaged error covariance of one user and its eigen-decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaStats {
    pub sigma_bar: CMat,
    /// Descending; entry `i` is the average MMSE of decorrelated stream `i`.
    pub eigenvalues: Vec<f64>,
    /// Unitary eigenbasis `U_k`, columns ordered like `eigenvalues`.
    pub basis: CMat,
}

/// Sample average of [`sigma_matrix`] for every user.
pub fn sigma_stats(precoders: &[CMat], channels: &WhitenedChannels) -> Result<Vec<SigmaStats>> {
    if precoders.len() != channels.users() {
        return Err(Error::Dimension("one precoder per user is required".into()));
    }
    let count = channels.count() as f64;
    precoders
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut acc = CMat::zeros(p.ncols(), p.ncols());
            for w in &channels.channels[k] {
                acc += sigma_matrix(precoders, k, w)?;
            }
            let sigma_bar = linalg::hermitian_part(&acc.unscale(count));
            let eig = linalg::hermitian_eigen(&sigma_bar);
            Ok(SigmaStats {
                sigma_bar,
                eigenvalues: eig.values,
                basis: eig.vectors,
            })
        })
        .collect()
}

/// Spatial decorrelation: `P'_k = P_k U_k`.
pub fn decorrelate(precoders: &[CMat], stats: &[SigmaStats]) -> Result<Vec<CMat>> {
    if precoders.len() != stats.len() {
        return Err(Error::Dimension("one SigmaStats per user is required".into()));
    }
    Ok(precoders.iter().zip(stats).map(|(p, s)| p * &s.basis).collect())
}

/// Rate of user `k` for one whitened realization, computed two ways:
/// `log2 det(I + W^H P_k P_k^H W X^{-1})` through an LU determinant, and
/// `-log2 det Σ_k` through a Cholesky factor.
pub fn rate_forms(precoders: &[CMat], user: usize, whitened: &CMat) -> Result<(f64, f64)> {
    let r = whitened.ncols();
    let wh = whitened.adjoint();
    let mut x = linalg::identity(r);
    for (i, p) in precoders.iter().enumerate() {
        if i != user {
            let wp = &wh * p;
            x += &wp * wp.adjoint();
        }
    }
    let own = &wh * &precoders[user];
    let signal = &own * own.adjoint();
    let det = (linalg::identity(r) + signal * linalg::hpd_inverse(&x)?).determinant();
    let det_form = det.norm().log2();
    let sigma_form = -linalg::log2_det_hpd(&sigma_matrix(precoders, user, whitened)?)?;
    Ok((det_form, sigma_form))
}

const RATE_FORM_TOL: f64 = 1e-8;

/// Average rate per user in bits. Both determinant forms are evaluated on
/// every sample and must agree to `1e-8`.
pub fn average_rate(precoders: &[CMat], channels: &WhitenedChannels) -> Result<Vec<f64>> {
    if precoders.len() != channels.users() {
        return Err(Error::Dimension("one precoder per user is required".into()));
    }
    let count = channels.count() as f64;
    (0..precoders.len())
        .map(|k| {
            let mut acc = 0.0;
            for (m, w) in channels.channels[k].iter().enumerate() {
                let (det_form, sigma_form) = rate_forms(precoders, k, w)?;
                if (det_form - sigma_form).abs() > RATE_FORM_TOL * det_form.abs().max(1.0) {
                    return Err(Error::Numeric(format!(
                        "user {k}, sample {m}: rate forms disagree ({det_form} vs {sigma_form})"
                    )));
                }
                acc += det_form;
            }
            Ok(acc / count)
        })
        .collect()
}

/// Lower bound `-Σ_i log2 λ_{k,i}` on the average rate. A zero eigenvalue
/// yields `f64::INFINITY`.
pub fn jensen_bound(stats: &[SigmaStats]) -> Vec<f64> {
    stats
        .iter()
        .map(|s| {
            if s.eigenvalues.iter().any(|&l| l <= 0.0) {
                f64::INFINITY
            } else {
                -s.eigenvalues.iter().map(|l| l.log2()).sum::<f64>()
            }
        })
        .collect()
}

/// Uplink powers as seen by the MSE formulas.
///
/// `own[a]` multiplies stream `a`'s own signal and self term; `interference[b]`
/// is what stream `b` radiates into every other receiver. They differ only for
/// switched-off streams, which keep a unit virtual power for their own filters
/// but radiate nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerProfile {
    pub own: Vec<f64>,
    pub interference: Vec<f64>,
}

impl PowerProfile {
    pub fn plain(xi: &[f64]) -> Self {
        Self {
            own: xi.to_vec(),
            interference: xi.to_vec(),
        }
    }

    /// Inactive streams: own power 1, interference 0.
    pub fn with_dummies(xi: &[f64], active: &[bool]) -> Self {
        Self {
            own: xi
                .iter()
                .zip(active)
                .map(|(&x, &on)| if on { x } else { 1.0 })
                .collect(),
            interference: xi
                .iter()
                .zip(active)
                .map(|(&x, &on)| if on { x } else { 0.0 })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.own.len()
    }

    pub fn is_empty(&self) -> bool {
        self.own.is_empty()
    }

    /// Covariance seen by receiver `a`: `Σ_{b≠a} interference_b Θ_b + own_a Θ_a + I`.
    pub fn receive_covariance(&self, moments: &Moments, a: usize) -> CMat {
        let n = moments.mu[a].len();
        let mut cov = linalg::identity(n);
        for (b, theta) in moments.theta.iter().enumerate() {
            let w = if b == a { self.own[b] } else { self.interference[b] };
            if w != 0.0 {
                cov += theta.scale(w);
            }
        }
        cov
    }
}

/// Scalars of the uplink MSE for fixed receive filters.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    /// `c_a = |g̃_a^H μ_a|^2`.
    pub gain: Vec<f64>,
    /// `θ_ab = g̃_a^H Θ_b g̃_a`, row `a` is the receiver.
    pub cross: DMatrix<f64>,
    /// `‖g̃_a‖^2`.
    pub noise: Vec<f64>,
}

pub fn coupling(g_tilde: &[CVec], moments: &Moments) -> Result<Coupling> {
    let d = g_tilde.len();
    if moments.mu.len() != d || moments.theta.len() != d {
        return Err(Error::Dimension(format!("{d} receivers for {} streams", moments.mu.len())));
    }
    let gain = g_tilde
        .iter()
        .zip(&moments.mu)
        .map(|(g, mu)| g.dotc(mu).norm_sqr())
        .collect();
    let cross = DMatrix::from_fn(d, d, |a, b| linalg::quad_form(&moments.theta[b], &g_tilde[a]));
    let noise = g_tilde.iter().map(|g| g.norm_squared()).collect();
    Ok(Coupling { gain, cross, noise })
}

impl Coupling {
    /// `y_a` under a power profile.
    pub fn y(&self, profile: &PowerProfile, a: usize) -> f64 {
        let mut y = self.noise[a];
        for b in 0..self.gain.len() {
            let w = if b == a { profile.own[b] } else { profile.interference[b] };
            y += w * self.cross[(a, b)];
        }
        y
    }

    pub fn mmse(&self, profile: &PowerProfile) -> Vec<f64> {
        (0..self.gain.len())
            .map(|a| 1.0 - profile.own[a] * self.gain[a] / self.y(profile, a))
            .collect()
    }
}

/// Minimum average uplink MSE of every stream for receivers `g̃` and powers `ξ`.
pub fn mac_mmse(g_tilde: &[CVec], moments: &Moments, xi: &[f64]) -> Result<Vec<f64>> {
    mac_mmse_with(g_tilde, moments, &PowerProfile::plain(xi))
}

pub fn mac_mmse_with(g_tilde: &[CVec], moments: &Moments, profile: &PowerProfile) -> Result<Vec<f64>> {
    if profile.len() != g_tilde.len() {
        return Err(Error::Dimension("one power per stream is required".into()));
    }
    if let Some(a) = g_tilde.iter().position(|g| g.norm() == 0.0) {
        return Err(Error::Numeric(format!("stream {a}: receive filter is zero")));
    }
    if profile.own.iter().chain(&profile.interference).any(|&x| x < 0.0) {
        return Err(Error::Contract("powers must be nonnegative".into()));
    }
    Ok(coupling(g_tilde, moments)?.mmse(profile))
}

/// Sum-MMSE matrix of the uplink for given transmit filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityMatrix {
    /// `I_d - E[Υ]^H (E[ΥΥ^H] + σ² I)^{-1} E[Υ]`.
    pub e_matrix: CMat,
    pub sigma2: f64,
    /// Trace of the noiseless (`σ² = 0`) matrix: the smallest achievable
    /// sum of per-stream MMSEs for these transmit filter directions.
    pub bound_rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub e_matrix: CMat,
    pub sigma2: f64,
    pub bound_rhs: f64,
    /// `Σ 2^{-ϱ_a}`.
    pub lhs: f64,
    pub feasible: bool,
}

/// Builds the sum-MMSE matrix from per-sample uplink precoders `τ` scaled by
/// `sqrt(ξ)`. A singular `E[ΥΥ^H]` at `σ² = 0` is handled with the
/// pseudo-inverse.
pub fn feasibility_matrix(
    channels: &WhitenedChannels,
    layout: &StreamLayout,
    tau: &StreamPrecoders,
    xi: &[f64],
    sigma2: f64,
) -> Result<FeasibilityMatrix> {
    let moments = moments_from_whitened(channels, tau, layout)?;
    feasibility_from_moments(&moments, xi, sigma2)
}

/// Same as [`feasibility_matrix`] given the stream moments: with
/// `Υ = [√ξ_a W τ_a]`, `E[Υ] = [√ξ_a μ_a]` and `E[ΥΥ^H] = Σ_a ξ_a Θ_a`.
pub fn feasibility_from_moments(moments: &Moments, xi: &[f64], sigma2: f64) -> Result<FeasibilityMatrix> {
    let d = moments.mu.len();
    if xi.len() != d {
        return Err(Error::Dimension("one power per stream is required".into()));
    }
    if sigma2 < 0.0 || xi.iter().any(|&x| x < 0.0) {
        return Err(Error::Contract("sigma2 and powers must be nonnegative".into()));
    }
    let n = moments.mu.first().map_or(0, |m| m.len());
    let mut mean = CMat::zeros(n, d);
    let mut second = CMat::zeros(n, n);
    for a in 0..d {
        mean.set_column(a, &moments.mu[a].scale(xi[a].sqrt()));
        second += moments.theta[a].scale(xi[a]);
    }
    let second = linalg::hermitian_part(&second);
    let explained = |inv: &CMat| linalg::hermitian_part(&(mean.adjoint() * inv * &mean));

    let noiseless = explained(&linalg::psd_pinv(&second));
    let bound_rhs = (d as f64 - linalg::real_trace(&noiseless)).clamp(0.0, d as f64);
    let e_matrix = if sigma2 == 0.0 {
        linalg::identity(d) - noiseless
    } else {
        let reg = &second + linalg::identity(n).scale(sigma2);
        linalg::identity(d) - linalg::hermitian_part(&(mean.adjoint() * linalg::hpd_solve(&reg, &mean)?))
    };
    Ok(FeasibilityMatrix {
        e_matrix,
        sigma2,
        bound_rhs,
    })
}

/// Necessary condition on the targets: their sum `Σ 2^{-ϱ_a}` cannot be
/// below `bound_rhs`, the smallest sum-MMSE the filter directions allow at
/// unlimited power (non-strict). The verdict depends on the targets only
/// through that sum.
pub fn check_feasibility(rho_streams: &[f64], matrix: &FeasibilityMatrix) -> Result<FeasibilityReport> {
    if rho_streams.iter().any(|&r| !(r >= 0.0)) {
        return Err(Error::Contract("per-stream targets must be nonnegative".into()));
    }
    if rho_streams.len() != matrix.e_matrix.nrows() {
        return Err(Error::Dimension("one target per stream is required".into()));
    }
    let lhs: f64 = rho_streams.iter().map(|&r| (-r).exp2()).sum();
    Ok(FeasibilityReport {
        e_matrix: matrix.e_matrix.clone(),
        sigma2: matrix.sigma2,
        bound_rhs: matrix.bound_rhs,
        lhs,
        feasible: lhs >= matrix.bound_rhs,
    })
}

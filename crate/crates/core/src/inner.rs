//! Power minimization for fixed per-stream MMSE targets in the dual uplink.
//!
//! One cycle of [`solve_inner`]:
//!
//! 1. with the uplink precoders `τ` (and hence the moments) fixed, alternate
//!    MMSE receivers ([`update_receivers`]) and the exact power allocation
//!    ([`solve_power_allocation`]) until the total power settles;
//! 2. refresh every per-sample precoder ([`update_precoders_per_sample`]) and
//!    re-estimate the moments.
//!
//! Step 1 never increases the total power. A precoder refresh that would
//! increase it is discarded and the previous state is returned, so the power
//! sequence reported in [`MacState::power_history`] is nonincreasing.

use log::debug;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{self, moments_from_whitened, Moments, StreamPrecoders, WhitenedChannels};
use crate::error::{Error, Result};
use crate::layout::StreamLayout;
use crate::linalg::{self, CMat, CVec};
use crate::mse::{self, coupling, Coupling, PowerProfile};

/// Channels and stream layout shared by every solve of one run.
#[derive(Debug, Clone)]
pub struct Problem {
    pub layout: StreamLayout,
    pub channels: WhitenedChannels,
}

impl Problem {
    pub fn new(layout: StreamLayout, samples: &channel::ChannelSampleSet, noise_covs: &[CMat]) -> Result<Self> {
        if layout.users() != samples.users() {
            return Err(Error::Dimension(format!(
                "layout has {} users, samples have {}",
                layout.users(),
                samples.users()
            )));
        }
        let r = samples.rx_antennas.min(samples.tx_antennas);
        if layout.streams_per_user().iter().any(|&d| d == 0 || d > r) {
            return Err(Error::Config(format!("stream counts must lie in 1..={r}")));
        }
        Ok(Self {
            layout,
            channels: WhitenedChannels::new(samples, noise_covs)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerOptions {
    /// Absolute tolerance on the change of total power between cycles.
    pub tol: f64,
    pub max_iters: usize,
    /// Seed for the random initial receive directions of a cold start.
    pub init_seed: u64,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 500,
            init_seed: 0,
        }
    }
}

/// Converged dual-uplink solution for one set of per-stream targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacState {
    pub rho: Vec<f64>,
    pub active: Vec<bool>,
    /// Average uplink power per stream; zero for switched-off streams.
    pub xi: Vec<f64>,
    pub tau: StreamPrecoders,
    /// Unit-norm receive directions.
    pub g_tilde: Vec<CVec>,
    /// Scalar equalizers `r` such that the full receiver is `r g̃`.
    pub equalizer: Vec<Complex64>,
    pub moments: Moments,
    pub achieved_mmse: Vec<f64>,
    pub total_power: f64,
    pub iterations: usize,
    pub power_history: Vec<f64>,
    /// Precoder refreshes that hit a zero vector and kept the old precoder.
    pub fallbacks: usize,
}

impl MacState {
    pub fn targets(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| (-r).exp2()).collect()
    }

    pub fn profile(&self) -> PowerProfile {
        PowerProfile::with_dummies(&self.xi, &self.active)
    }

    /// Own power used in filter updates and derivatives: `ξ` when active, 1 otherwise.
    pub fn virtual_xi(&self) -> Vec<f64> {
        self.profile().own
    }
}

/// MMSE receive directions `(Σ_b ξ_b Θ_b + I)^{-1} μ_a`, normalized to unit norm.
/// A zero `μ_a` yields a zero direction.
pub fn update_receivers(moments: &Moments, profile: &PowerProfile) -> Result<Vec<CVec>> {
    (0..moments.mu.len())
        .map(|a| {
            let cov = profile.receive_covariance(moments, a);
            let g = linalg::hpd_solve_vec(&cov, &moments.mu[a])?;
            let norm = g.norm();
            Ok(if norm > 0.0 { g.unscale(norm) } else { g })
        })
        .collect()
}

/// Powers that meet every MMSE target with equality for fixed receivers.
///
/// Setting `1 - ξ_a c_a / y_a = ε_a` for all streams gives the linear system
/// `ξ_a c_a - (1 - ε_a) Σ_b θ_ab ξ_b = (1 - ε_a) ‖g̃_a‖^2`. Streams with
/// `ε_a = 1` get zero power and drop out.
pub fn solve_power_allocation(g_tilde: &[CVec], moments: &Moments, targets: &[f64]) -> Result<Vec<f64>> {
    let coupled = coupling(g_tilde, moments)?;
    allocate_with(&coupled, targets)
}

pub(crate) fn allocate_with(coupled: &Coupling, targets: &[f64]) -> Result<Vec<f64>> {
    let d = coupled.gain.len();
    if targets.len() != d {
        return Err(Error::Dimension(format!("{} targets for {d} streams", targets.len())));
    }
    if targets.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
        return Err(Error::Contract("MMSE targets must lie in (0, 1]".into()));
    }
    let live: Vec<usize> = (0..d).filter(|&a| targets[a] < 1.0).collect();
    let mut xi = vec![0.0; d];
    if live.is_empty() {
        return Ok(xi);
    }
    let n = live.len();
    let mut system = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for (i, &a) in live.iter().enumerate() {
        let slack = 1.0 - targets[a];
        for (j, &b) in live.iter().enumerate() {
            system[(i, j)] = -slack * coupled.cross[(a, b)];
        }
        system[(i, i)] += coupled.gain[a];
        rhs[i] = slack * coupled.noise[a];
    }
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InfeasibleForFilters("power allocation system is singular".into()))?;
    for (i, &a) in live.iter().enumerate() {
        if !(sol[i] > 0.0 && sol[i].is_finite()) {
            return Err(Error::InfeasibleForFilters(format!(
                "stream {a} would need power {:e}",
                sol[i]
            )));
        }
        xi[a] = sol[i];
    }
    Ok(xi)
}

/// Smallest powers meeting the targets for fixed precoders, with the receive
/// filters optimized inside the iteration.
///
/// This is the standard interference-function fixed point started from zero:
/// stream `a` needs `γ_a / λ_max(B_a^{-1/2} (μ_a μ_a^H - γ_a (Θ_a - μ_a μ_a^H)) B_a^{-1/2})`
/// with `γ_a = 1/ε_a - 1` and `B_a` the interference-plus-noise covariance.
/// Used to start the solver when the current receivers admit no solution of
/// the linear system.
pub fn min_power_fixed_precoders(moments: &Moments, targets: &[f64]) -> Result<Vec<f64>> {
    const MAX_ITERS: usize = 20_000;
    const POWER_CAP: f64 = 1e12;
    let d = moments.mu.len();
    let mut xi = vec![0.0; d];
    for _ in 0..MAX_ITERS {
        let mut next = vec![0.0; d];
        for a in 0..d {
            if targets[a] >= 1.0 {
                continue;
            }
            let gamma = 1.0 / targets[a] - 1.0;
            let mut others = xi.clone();
            others[a] = 0.0;
            let cov = PowerProfile::plain(&others).receive_covariance(moments, a);
            let mu = &moments.mu[a];
            let outer = mu * mu.adjoint();
            let useful = &outer - (&moments.theta[a] - &outer).scale(gamma);
            let chol = cov
                .cholesky()
                .ok_or_else(|| Error::Numeric("interference covariance is not PD".into()))?;
            let l = chol.l();
            let half = l
                .solve_lower_triangular(&useful)
                .ok_or_else(|| Error::Numeric("triangular solve failed".into()))?;
            let whitened = l
                .solve_lower_triangular(&half.adjoint())
                .ok_or_else(|| Error::Numeric("triangular solve failed".into()))?;
            let top = linalg::hermitian_eigen(&whitened).values[0];
            if !(top > 0.0) {
                return Err(Error::InfeasibleForFilters(format!(
                    "stream {a} cannot reach its target with these precoders"
                )));
            }
            next[a] = gamma / top;
        }
        if next.iter().any(|&x| !(x < POWER_CAP)) {
            return Err(Error::InfeasibleForFilters("required power diverges".into()));
        }
        let scale = next.iter().cloned().fold(1.0, f64::max);
        let change = next.iter().zip(&xi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        xi = next;
        if change <= 1e-13 * scale {
            return Ok(xi);
        }
    }
    Err(Error::InfeasibleForFilters(
        "power iteration did not settle; targets are at or beyond the feasibility boundary".into(),
    ))
}

/// Per-sample uplink precoders.
///
/// For stream `a` of user `k` and realization `m`, let `A = I_R + W^H G Ω G^H W`
/// (with `G` stacking the receive directions and `Ω = diag(weights)`) and
/// `e = W^H g̃_a`. Without `previous`, `τ ∝ A^{-1} e`, the normalized MMSE
/// receiver of the conjugate downlink.
///
/// With `previous`, each stream's ratio `|E[τ^H e]|^2 / E[τ^H A τ]` is
/// maximized under the per-sample unit-norm constraint by minorize-maximize
/// steps started at `previous`: with `m0 = E[τ0^H e]` and `λ0` the current
/// ratio, every sample solves `min τ^H A τ - 2 Re(τ^H e m0^* / λ0)` over
/// `‖τ‖ = 1`. When `weights` are the downlink powers of the dual solution
/// this ratio fixes the downlink MSE of stream `a`, so the update never
/// increases the power needed for the same targets.
///
/// Every stream is rotated by a common phase so that `E[τ^H e]` is real and
/// positive. A zero vector keeps `previous[a][m]` (or the first canonical
/// vector) and is counted in the returned total.
pub fn update_precoders_per_sample(
    g_tilde: &[CVec],
    weights: &[f64],
    channels: &WhitenedChannels,
    layout: &StreamLayout,
    previous: Option<&StreamPrecoders>,
) -> Result<(StreamPrecoders, usize)> {
    check_precoder_inputs(g_tilde, weights, channels, layout, previous)?;
    let weighted = weighted_outer(g_tilde, weights, channels.tx_antennas);
    let mut tau: StreamPrecoders = vec![Vec::new(); layout.total_streams()];
    let mut fallbacks = 0;
    for k in 0..layout.users() {
        let bases = UserBases::new(g_tilde, &weighted, &channels.channels[k], layout.range(k));
        for (i, a) in layout.range(k).enumerate() {
            let coords = match previous {
                None => bases.solve(i, None, None),
                Some(prev) => {
                    let start = prev[a]
                        .iter()
                        .zip(&bases.eig)
                        .map(|(t, eig)| eig.vectors.adjoint() * t)
                        .collect();
                    maximize_ratio(start, &bases.projected[i], &bases.eig)
                }
            };
            let (column, fell_back) = bases.to_precoders(coords, previous.map(|p| p[a].as_slice()));
            fallbacks += fell_back;
            tau[a] = column;
            align_phase(&mut tau[a], &g_tilde[a], &channels.channels[k]);
        }
    }
    Ok((tau, fallbacks))
}

fn check_precoder_inputs(
    g_tilde: &[CVec],
    weights: &[f64],
    channels: &WhitenedChannels,
    layout: &StreamLayout,
    previous: Option<&StreamPrecoders>,
) -> Result<()> {
    let d = layout.total_streams();
    if g_tilde.len() != d || weights.len() != d {
        return Err(Error::Dimension("one receiver and weight per stream is required".into()));
    }
    if let Some(p) = previous {
        if p.len() != d || p.iter().any(|t| t.len() != channels.count()) {
            return Err(Error::Dimension("previous precoders do not match the sample set".into()));
        }
    }
    Ok(())
}

/// `G Ω G^H`.
fn weighted_outer(g_tilde: &[CVec], weights: &[f64], n: usize) -> CMat {
    let mut out = CMat::zeros(n, n);
    for (g, &w) in g_tilde.iter().zip(weights) {
        if w > 0.0 {
            out.gerc(Complex64::new(w, 0.0), g, g, linalg::ONE);
        }
    }
    out
}

/// Eigenpairs of `A` for every sample of one user, and each of the user's
/// streams' `e = W^H g̃_a` in those eigenbases.
struct UserBases {
    eig: Vec<linalg::HermitianEigen>,
    projected: Vec<Vec<CVec>>,
}

impl UserBases {
    fn new(g_tilde: &[CVec], weighted: &CMat, channels: &[CMat], streams: std::ops::Range<usize>) -> Self {
        let mut eig = Vec::with_capacity(channels.len());
        let mut projected = vec![Vec::with_capacity(channels.len()); streams.len()];
        for w in channels {
            let wh = w.adjoint();
            let r = wh.nrows();
            let e = linalg::hermitian_eigen(&(linalg::identity(r) + &wh * weighted * w));
            for (i, a) in streams.clone().enumerate() {
                projected[i].push(e.vectors.adjoint() * (&wh * &g_tilde[a]));
            }
            eig.push(e);
        }
        Self { eig, projected }
    }

    /// Eigen-coordinates of the precoders of the `i`-th stream: the
    /// unit-norm minimizers of `x^H Λ x - 2 α Re(x^H e)` for `Some(α)`, or
    /// `Λ^{-1} e` (before normalization) for `None`.
    fn solve(&self, i: usize, anchor: Option<f64>, previous: Option<&[CVec]>) -> Vec<CVec> {
        self.projected[i]
            .iter()
            .zip(&self.eig)
            .enumerate()
            .map(|(m, (e, eig))| match anchor {
                Some(alpha) => {
                    let hint = previous.map(|p| eig.vectors.adjoint() * &p[m]);
                    unit_norm_minimizer(&eig.values, &e.scale(alpha), hint.as_ref())
                }
                None => CVec::from_iterator(e.len(), e.iter().zip(&eig.values).map(|(z, &l)| z / l)),
            })
            .collect()
    }

    fn to_precoders(&self, coords: Vec<CVec>, previous: Option<&[CVec]>) -> (Vec<CVec>, usize) {
        let mut fallbacks = 0;
        let column = coords
            .iter()
            .zip(&self.eig)
            .enumerate()
            .map(|(m, (x, eig))| {
                let t = &eig.vectors * x;
                let norm = t.norm();
                if norm > 0.0 && norm.is_finite() {
                    t.unscale(norm)
                } else {
                    fallbacks += 1;
                    previous.map_or_else(|| canonical(x.len(), 0), |p| p[m].clone())
                }
            })
            .collect();
        (column, fallbacks)
    }
}

/// `E[τ^H W^H g̃]` and `E[τ^H A τ]` for one stream.
fn ratio_terms(tau: &[CVec], g: &CVec, weighted: &CMat, channels: &[CMat]) -> (Complex64, f64) {
    let mut m = linalg::ZERO;
    let mut q = 0.0;
    for (t, w) in tau.iter().zip(channels) {
        let wt = w * t;
        m += wt.dotc(g);
        q += t.norm_squared() + linalg::quad_form(weighted, &wt);
    }
    let count = tau.len() as f64;
    (m / count, q / count)
}

/// Minorize-maximize iterations on `|E[x^H e]|^2 / E[x^H Λ x]` over unit-norm
/// `x` per sample, all in the per-sample eigenbases. Stops when the ratio
/// stops improving. Returns `start` unchanged if it carries no signal.
fn maximize_ratio(start: Vec<CVec>, projected: &[CVec], bases: &[linalg::HermitianEigen]) -> Vec<CVec> {
    const MAX_STEPS: usize = 200;
    let count = start.len() as f64;
    let ratio = |xs: &[CVec]| -> (Complex64, f64) {
        let mut m = linalg::ZERO;
        let mut q = 0.0;
        for ((x, e), eig) in xs.iter().zip(projected).zip(bases) {
            m += x.dotc(e);
            q += x.iter().zip(&eig.values).map(|(z, &l)| l * z.norm_sqr()).sum::<f64>();
        }
        (m / count, q / count)
    };
    let mut current = start;
    let (mut m0, mut q0) = ratio(&current);
    for _ in 0..MAX_STEPS {
        let signal = m0.norm_sqr();
        if signal <= 1e-300 || !(q0 > 0.0) {
            break;
        }
        let anchor = m0.conj() * (q0 / signal);
        let next: Vec<CVec> = projected
            .iter()
            .zip(bases)
            .zip(&current)
            .map(|((e, eig), x)| unit_norm_minimizer(&eig.values, &e.map(|z| z * anchor), Some(x)))
            .collect();
        let (m1, q1) = ratio(&next);
        let before = signal / q0;
        let after = m1.norm_sqr() / q1;
        if !(after >= before) {
            break;
        }
        current = next;
        (m0, q0) = (m1, q1);
        if after - before <= 1e-14 * after {
            break;
        }
    }
    current
}

/// Solves `min x^H Λ x - 2 Re(x^H b)` over `‖x‖ = 1` for a positive diagonal
/// `Λ` given by `values` (descending). The minimizer is `x = (Λ + κI)^{-1} b`
/// with `κ > -λ_min` such that `‖x‖ = 1`; the shift `δ = κ + λ_min` comes
/// from Newton steps on `1/‖x(δ)‖`, safeguarded by bisection.
///
/// When `b` has no weight on the smallest eigenvalue and `‖x‖ < 1` for every
/// `δ > 0` (the hard case, typical when few streams are active), the leftover
/// norm goes into the smallest eigenspace along `hint`, which keeps the
/// choice continuous between calls.
fn unit_norm_minimizer(values: &[f64], b: &CVec, hint: Option<&CVec>) -> CVec {
    let n = values.len();
    let lmin = values[n - 1];
    let cluster_tol = 1e-12 * values[0].abs().max(1.0);
    let gaps: Vec<f64> = values
        .iter()
        .map(|&l| if l - lmin <= cluster_tol { 0.0 } else { l - lmin })
        .collect();
    let weights: Vec<f64> = b.iter().map(|z| z.norm_sqr()).collect();
    let b_norm = weights.iter().sum::<f64>().sqrt();
    let inside = (0..n).filter(|&i| gaps[i] == 0.0).map(|i| weights[i]).sum::<f64>().sqrt();
    if inside <= 1e-13 * b_norm {
        let outside: f64 = (0..n)
            .filter(|&i| gaps[i] > 0.0)
            .map(|i| weights[i] / (gaps[i] * gaps[i]))
            .sum();
        if outside <= 1.0 {
            let in_cluster = |v: &CVec| -> Option<CVec> {
                let u = CVec::from_iterator(n, (0..n).map(|i| if gaps[i] == 0.0 { v[i] } else { linalg::ZERO }));
                let norm = u.norm();
                (norm > 0.0).then(|| u.unscale(norm))
            };
            let u = hint.and_then(in_cluster).unwrap_or_else(|| canonical(n, n - 1));
            let x = CVec::from_iterator(
                n,
                (0..n).map(|i| if gaps[i] > 0.0 { b[i] / gaps[i] } else { linalg::ZERO }),
            );
            return x + u.scale((1.0 - outside).sqrt());
        }
    }
    let norm_at = |delta: f64| -> (f64, f64) {
        let mut p2 = 0.0;
        let mut q2 = 0.0;
        for i in 0..n {
            let s = gaps[i] + delta;
            p2 += weights[i] / (s * s);
            q2 += weights[i] / (s * s * s);
        }
        (p2.sqrt(), q2)
    };
    let mut lo = 0.0;
    let mut hi = b_norm;
    let mut delta = hi;
    for _ in 0..200 {
        let (p, q2) = norm_at(delta);
        if !p.is_finite() || p > 1.0 {
            lo = delta;
        } else {
            hi = delta;
        }
        if (p - 1.0).abs() <= 1e-15 || hi - lo <= 1e-15 * hi {
            break;
        }
        let newton = delta + (p * p / q2) * (p - 1.0);
        delta = if p.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    CVec::from_iterator(n, b.iter().zip(&gaps).map(|(z, &g)| z / (g + delta)))
}

/// Rotates all samples of one stream by the phase that makes `E[τ^H W^H g̃]`
/// real and positive.
fn align_phase(tau: &mut [CVec], g: &CVec, channels: &[CMat]) {
    let mean: Complex64 = tau.iter().zip(channels).map(|(t, w)| (w * t).dotc(g)).sum();
    let norm = mean.norm();
    if norm > 0.0 {
        let phase = mean / norm;
        tau.iter_mut().for_each(|t| *t *= phase);
    }
}

fn canonical(n: usize, i: usize) -> CVec {
    let mut v = CVec::zeros(n);
    v[i] = linalg::ONE;
    v
}

/// Cold-start precoders: matched filters `W^H g̃_a` towards random receive
/// directions drawn from `seed`.
pub fn initial_precoders(channels: &WhitenedChannels, layout: &StreamLayout, seed: u64) -> Result<StreamPrecoders> {
    let mut rng = channel::seeded_rng(seed, channel::rng_stream::FILTER_INIT);
    let n = channels.tx_antennas;
    let g: Vec<CVec> = (0..layout.total_streams())
        .map(|_| {
            let v = CVec::from_fn(n, |_, _| channel::complex_gaussian(&mut rng));
            let norm = v.norm();
            v.unscale(norm)
        })
        .collect();
    let zeros = vec![0.0; g.len()];
    Ok(update_precoders_per_sample(&g, &zeros, channels, layout, None)?.0)
}

/// Receivers and powers for fixed precoders, alternated to a fixed point.
/// Returns the receivers used for the final allocation and the powers.
fn settle_powers(
    moments: &Moments,
    targets: &[f64],
    active: &[bool],
    start: Option<&[f64]>,
) -> Result<(Vec<CVec>, Vec<f64>)> {
    const MAX_SWEEPS: usize = 1000;
    let attempt = |xi: &[f64]| -> Result<(Vec<CVec>, Vec<f64>)> {
        let g = update_receivers(moments, &PowerProfile::with_dummies(xi, active))?;
        let next = solve_power_allocation(&g, moments, targets)?;
        Ok((g, next))
    };
    let mut current = match start.map(&attempt) {
        Some(Ok(found)) => found,
        _ => {
            let xi = min_power_fixed_precoders(moments, targets)?;
            attempt(&xi)?
        }
    };
    for _ in 0..MAX_SWEEPS {
        let power: f64 = current.1.iter().sum();
        let next = attempt(&current.1)?;
        let next_power: f64 = next.1.iter().sum();
        let settled = power - next_power <= 1e-13 * power.max(1.0);
        if next_power <= power {
            current = next;
        }
        if settled {
            break;
        }
    }
    Ok(current)
}

fn build_state(
    rho: &[f64],
    active: &[bool],
    tau: StreamPrecoders,
    moments: Moments,
    g_tilde: Vec<CVec>,
    xi: Vec<f64>,
) -> Result<MacState> {
    let coupled = coupling(&g_tilde, &moments)?;
    let plain = PowerProfile::plain(&xi);
    let achieved_mmse = coupled.mmse(&plain);
    let equalizer = (0..xi.len())
        .map(|a| {
            let y = coupled.y(&plain, a);
            g_tilde[a].dotc(&moments.mu[a]) * (xi[a].sqrt() / y)
        })
        .collect();
    let total_power = xi.iter().sum();
    Ok(MacState {
        rho: rho.to_vec(),
        active: active.to_vec(),
        xi,
        tau,
        g_tilde,
        equalizer,
        moments,
        achieved_mmse,
        total_power,
        iterations: 0,
        power_history: Vec::new(),
        fallbacks: 0,
    })
}

/// Inner problem: minimum total uplink power such that stream `a` reaches an
/// average MMSE of `2^{-ρ_a}`. Streams with `ρ_a = 0` are switched off and
/// carry dummy filters.
///
/// A cold start whose random initial precoders cannot support the targets is
/// recovered by continuation: the targets are scaled down until a solve
/// succeeds and then raised back, each stage warm-started from the last.
pub fn solve_inner(
    rho_streams: &[f64],
    problem: &Problem,
    warm_start: Option<&MacState>,
    options: &InnerOptions,
) -> Result<MacState> {
    let d = problem.layout.total_streams();
    if rho_streams.len() != d {
        return Err(Error::Dimension(format!("{} targets for {d} streams", rho_streams.len())));
    }
    if rho_streams.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
        return Err(Error::Contract("per-stream targets must be finite and nonnegative".into()));
    }
    if let Some(w) = warm_start.filter(|w| w.tau.len() == d && w.xi.len() == d) {
        return refine(rho_streams, problem, w.tau.clone(), Some(w.xi.clone()), options);
    }
    let tau = initial_precoders(&problem.channels, &problem.layout, options.init_seed)?;
    let full_error = match refine(rho_streams, problem, tau.clone(), None, options) {
        Err(e @ Error::Infeasible { .. }) => e,
        other => return other,
    };
    let scaled = |lambda: f64| -> Vec<f64> { rho_streams.iter().map(|r| r * lambda).collect() };
    // Intermediate stages only provide warm starts, so a short budget suffices.
    let stage_options = InnerOptions {
        max_iters: options.max_iters.min(CONTINUATION_STAGE_ITERS),
        ..options.clone()
    };
    let stage = |rho: &[f64], tau: StreamPrecoders, start: Option<Vec<f64>>| -> Result<Option<MacState>> {
        match refine(rho, problem, tau, start, &stage_options) {
            Ok(state) => Ok(Some(state)),
            Err(Error::NotConverged { best: Some(best), .. }) => Ok(Some(*best)),
            Err(Error::Infeasible { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    const MIN_FRACTION: f64 = 1e-6;

    let mut lambda = 1.0;
    let mut current = loop {
        lambda *= 0.5;
        if lambda < MIN_FRACTION {
            return Err(full_error);
        }
        if let Some(state) = stage(&scaled(lambda), tau.clone(), None)? {
            break state;
        }
    };
    let mut increment = lambda;
    loop {
        let next = (lambda + increment).min(1.0);
        if next == 1.0 {
            match refine(rho_streams, problem, current.tau.clone(), Some(current.xi.clone()), options) {
                Err(Error::Infeasible { .. }) => {}
                other => return other,
            }
        } else if let Some(state) = stage(&scaled(next), current.tau.clone(), Some(current.xi.clone()))? {
            debug!("continuation reached {next} of the targets");
            current = state;
            lambda = next;
            continue;
        }
        increment *= 0.5;
        if increment < MIN_FRACTION {
            return Err(full_error);
        }
    }
}

const CONTINUATION_STAGE_ITERS: usize = 20;

/// Alternating cycles from the given precoders (and optional starting powers).
fn refine(
    rho_streams: &[f64],
    problem: &Problem,
    tau: StreamPrecoders,
    start: Option<Vec<f64>>,
    options: &InnerOptions,
) -> Result<MacState> {
    let layout = &problem.layout;
    let targets: Vec<f64> = rho_streams.iter().map(|&r| (-r).exp2()).collect();
    let active: Vec<bool> = rho_streams.iter().map(|&r| r > 0.0).collect();
    let evaluate = |tau: StreamPrecoders, start: Option<&[f64]>| -> Result<MacState> {
        let moments = moments_from_whitened(&problem.channels, &tau, layout)?;
        match settle_powers(&moments, &targets, &active, start) {
            Ok((g_tilde, xi)) => build_state(rho_streams, &active, tau, moments, g_tilde, xi),
            Err(e) => Err(infeasible(e, &moments, &targets)),
        }
    };

    let mut best = evaluate(tau, start.as_deref())?;
    best.iterations = 1;
    let mut history = vec![best.total_power];
    let mut fallbacks = 0;
    if !active.iter().any(|&a| a) {
        return Ok(finish(best, history, fallbacks));
    }
    let gauge = Gauge::new(&best.g_tilde);
    let mut accel = Anderson::new(ANDERSON_DEPTH);
    let mut input = gauge.pack(&best, problem)?;
    let mut input_is_plain = true;
    for iteration in 2..=options.max_iters {
        let (tau, fell_back) = gauge.cycle(&input, problem, &best.tau);
        fallbacks += fell_back;
        let candidate = evaluate(tau, Some(&best.xi)).ok();
        match candidate {
            Some(mut next) if next.total_power <= best.total_power => {
                let output = gauge.pack(&next, problem)?;
                accel.push(&input, &output);
                input = accel.extrapolate().unwrap_or_else(|| output.clone());
                input_is_plain = false;
                next.iterations = iteration;
                history.push(next.total_power);
                let gain = best.total_power - next.total_power;
                best = next;
                if gain < options.tol {
                    return Ok(finish(best, history, fallbacks));
                }
            }
            _ if input_is_plain => {
                debug!("inner cycle {iteration}: plain cycle did not lower the power, stopping");
                return Ok(finish(best, history, fallbacks));
            }
            _ => {
                // Extrapolated point was worse: restart from the best state.
                accel.clear();
                input = gauge.pack(&best, problem)?;
                input_is_plain = true;
            }
        }
    }
    Err(Error::NotConverged {
        iterations: options.max_iters,
        best: Some(Box::new(finish(best, history, fallbacks))),
    })
}

const ANDERSON_DEPTH: usize = 8;

/// Real coordinates of the cycle map. Per stream: the receive direction
/// (with a fixed phase reference), the log of its dual downlink power and the
/// log of its minorize-maximize anchor `E[τ^H A τ] / |E[τ^H W^H g̃]|`.
///
/// From the coordinates of a state, one cycle is a single minorize-maximize
/// step on every stream's ratio, hence never increases the power. The anchor
/// is part of the state so that the acceleration also extrapolates it.
struct Gauge {
    pivots: Vec<usize>,
    dim: usize,
}

impl Gauge {
    fn new(g_tilde: &[CVec]) -> Self {
        let pivots = g_tilde
            .iter()
            .map(|g| (0..g.len()).max_by(|&i, &j| g[i].norm().total_cmp(&g[j].norm())).unwrap_or(0))
            .collect();
        Self {
            pivots,
            dim: g_tilde.first().map_or(0, |g| g.len()),
        }
    }

    fn stride(&self) -> usize {
        2 * self.dim + 2
    }

    /// Switched-off streams have no downlink power; their logarithm is
    /// `-inf`, which the acceleration passes through.
    fn pack(&self, state: &MacState, problem: &Problem) -> Result<Vec<f64>> {
        let coupled = coupling(&state.g_tilde, &state.moments)?;
        let beta2 = downlink_powers(&coupled, &state.achieved_mmse)?;
        let weighted = weighted_outer(&state.g_tilde, &beta2, self.dim);
        let mut out = Vec::with_capacity(state.g_tilde.len() * self.stride());
        for k in 0..problem.layout.users() {
            for a in problem.layout.range(k) {
                let g = &state.g_tilde[a];
                let pivot = g[self.pivots[a]];
                let phase = if pivot.norm() > 0.0 { pivot.conj() / pivot.norm() } else { linalg::ONE };
                for z in g.iter() {
                    let z = z * phase;
                    out.push(z.re);
                    out.push(z.im);
                }
                out.push(if beta2[a] > 0.0 { beta2[a].ln() } else { f64::NEG_INFINITY });
                let (m, q) = ratio_terms(&state.tau[a], g, &weighted, &problem.channels.channels[k]);
                let anchor = q / m.norm();
                out.push(if anchor > 0.0 && anchor.is_finite() { anchor.ln() } else { f64::NAN });
            }
        }
        Ok(out)
    }

    /// Receivers, weights and anchors (`None` when unusable).
    fn unpack(&self, x: &[f64]) -> (Vec<CVec>, Vec<f64>, Vec<Option<f64>>) {
        let stride = self.stride();
        let streams = x.len() / stride;
        let mut g_tilde = Vec::with_capacity(streams);
        let mut weights = Vec::with_capacity(streams);
        let mut anchors = Vec::with_capacity(streams);
        for chunk in x.chunks(stride) {
            let g = CVec::from_iterator(self.dim, (0..self.dim).map(|n| Complex64::new(chunk[2 * n], chunk[2 * n + 1])));
            let norm = g.norm();
            g_tilde.push(if norm > 0.0 { g.unscale(norm) } else { g });
            weights.push(chunk[stride - 2].exp());
            let anchor = chunk[stride - 1].exp();
            anchors.push((anchor > 0.0 && anchor.is_finite()).then_some(anchor));
        }
        (g_tilde, weights, anchors)
    }

    /// Precoders produced by one cycle from coordinates `x`.
    fn cycle(&self, x: &[f64], problem: &Problem, previous: &StreamPrecoders) -> (StreamPrecoders, usize) {
        let (g_tilde, weights, anchors) = self.unpack(x);
        let weighted = weighted_outer(&g_tilde, &weights, self.dim);
        let layout = &problem.layout;
        let mut tau: StreamPrecoders = vec![Vec::new(); layout.total_streams()];
        let mut fallbacks = 0;
        for k in 0..layout.users() {
            let channels = &problem.channels.channels[k];
            let bases = UserBases::new(&g_tilde, &weighted, channels, layout.range(k));
            for (i, a) in layout.range(k).enumerate() {
                let coords = bases.solve(i, anchors[a], Some(&previous[a]));
                let (column, fell_back) = bases.to_precoders(coords, Some(&previous[a]));
                fallbacks += fell_back;
                tau[a] = column;
                align_phase(&mut tau[a], &g_tilde[a], channels);
            }
        }
        (tau, fallbacks)
    }
}

/// Anderson acceleration (type II) of a fixed-point map `x -> G(x)`.
/// Coordinates that are not finite in any stored pair are passed through
/// from the latest output.
struct Anderson {
    depth: usize,
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Self {
            depth,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn clear(&mut self) {
        self.inputs.clear();
        self.outputs.clear();
    }

    fn push(&mut self, input: &[f64], output: &[f64]) {
        if self.inputs.len() > self.depth {
            self.inputs.remove(0);
            self.outputs.remove(0);
        }
        self.inputs.push(input.to_vec());
        self.outputs.push(output.to_vec());
    }

    fn extrapolate(&self) -> Option<Vec<f64>> {
        let len = self.inputs.len();
        if len < 2 {
            return None;
        }
        let n = self.inputs[0].len();
        let usable: Vec<usize> = (0..n)
            .filter(|&i| (0..len).all(|j| self.inputs[j][i].is_finite() && self.outputs[j][i].is_finite()))
            .collect();
        let residual = |j: usize, i: usize| self.outputs[j][i] - self.inputs[j][i];
        let cols = len - 1;
        let mut df = DMatrix::<f64>::zeros(usable.len(), cols);
        let mut rhs = DVector::<f64>::zeros(usable.len());
        for (row, &i) in usable.iter().enumerate() {
            for j in 0..cols {
                df[(row, j)] = residual(j + 1, i) - residual(j, i);
            }
            rhs[row] = residual(len - 1, i);
        }
        let scale = df.norm();
        if !(scale > 0.0) {
            return None;
        }
        let gamma = df.svd(true, true).solve(&rhs, 1e-10 * scale).ok()?;
        let latest = &self.outputs[len - 1];
        let mut out = latest.clone();
        for &i in &usable {
            let mut shift = 0.0;
            for j in 0..cols {
                shift += gamma[j] * (self.outputs[j + 1][i] - self.outputs[j][i]);
            }
            out[i] = latest[i] - shift;
        }
        out.iter().all(|v| !v.is_nan()).then_some(out)
    }
}

fn finish(mut state: MacState, history: Vec<f64>, fallbacks: usize) -> MacState {
    state.power_history = history;
    state.fallbacks = fallbacks;
    state
}

fn infeasible(cause: Error, moments: &Moments, targets: &[f64]) -> Error {
    match cause {
        Error::InfeasibleForFilters(reason) => {
            let unit = vec![1.0; targets.len()];
            let rho: Vec<f64> = targets.iter().map(|t| -t.log2()).collect();
            let report = mse::feasibility_from_moments(moments, &unit, 0.0)
                .and_then(|m| mse::check_feasibility(&rho, &m))
                .ok()
                .map(Box::new);
            Error::Infeasible { reason, report }
        }
        other => other,
    }
}

/// Downlink solution obtained from a dual-uplink state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcSolution {
    pub rho: Vec<f64>,
    pub streams_per_user: Vec<usize>,
    /// `P_k`, `N x d_k`; column `i` is `β_{k,i} g̃_{k,i}`.
    pub precoders: Vec<CMat>,
    /// `β_a^2`.
    pub stream_powers: Vec<f64>,
    /// Average downlink MSE per stream with the dual receivers `c_a τ_a^{(m)}`.
    pub stream_mse: Vec<f64>,
    /// Scalars `c_a` of the dual receivers.
    pub receiver_scale: Vec<Complex64>,
    /// Average per-stream MSE with per-sample MMSE receivers; never above `stream_mse`.
    pub mmse_receiver_mse: Vec<f64>,
    pub total_power: f64,
    pub mac_total_power: f64,
    /// In-sample average rate per user, bits.
    pub rates: Vec<f64>,
}

/// `β^2` from the transposed system
/// `β_a^2 c_a - (1 - ε_a) Σ_b θ_ba β_b^2 = 1 - ε_a`; zero where `ε_a = 1`.
pub(crate) fn downlink_powers(coupled: &Coupling, eps: &[f64]) -> Result<Vec<f64>> {
    let d = eps.len();
    let live: Vec<usize> = (0..d).filter(|&a| eps[a] < 1.0).collect();
    let mut beta2 = vec![0.0; d];
    if !live.is_empty() {
        let n = live.len();
        let mut system = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for (i, &a) in live.iter().enumerate() {
            let slack = 1.0 - eps[a];
            for (j, &b) in live.iter().enumerate() {
                system[(i, j)] = -slack * coupled.cross[(b, a)];
            }
            system[(i, i)] += coupled.gain[a];
            rhs[i] = slack;
        }
        let sol = system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Duality("downlink power system is singular".into()))?;
        for (i, &a) in live.iter().enumerate() {
            if !(sol[i] > 0.0) {
                return Err(Error::Duality(format!("stream {a} gets downlink power {:e}", sol[i])));
            }
            beta2[a] = sol[i];
        }
    }

    Ok(beta2)
}

/// Transfers an uplink solution to the downlink.
///
/// The precoder of stream `a` is `β_a g̃_a`; the user-side receiver is the
/// uplink precoder `τ_a` scaled by one complex factor per stream. Equating
/// each downlink MSE to the uplink MMSE gives the transposed system
/// `β_a^2 c_a - (1 - ε_a) Σ_b θ_ba β_b^2 = 1 - ε_a`, whose solution has the
/// same total power as the uplink.
pub fn mac_to_bc(state: &MacState, problem: &Problem) -> Result<BcSolution> {
    let layout = &problem.layout;
    let d = layout.total_streams();
    if state.xi.len() != d {
        return Err(Error::Dimension("state does not match the problem layout".into()));
    }
    let coupled = coupling(&state.g_tilde, &state.moments)?;
    let eps: Vec<f64> = state
        .achieved_mmse
        .iter()
        .zip(&state.active)
        .map(|(&e, &on)| if on { e } else { 1.0 })
        .collect();
    let beta2 = downlink_powers(&coupled, &eps)?;

    let mut stream_mse = vec![1.0; d];
    let mut receiver_scale = vec![linalg::ZERO; d];
    for a in 0..d {
        let z: f64 = 1.0 + (0..d).map(|b| beta2[b] * coupled.cross[(b, a)]).sum::<f64>();
        let own = state.g_tilde[a].dotc(&state.moments.mu[a]).conj();
        receiver_scale[a] = own * (beta2[a].sqrt() / z);
        stream_mse[a] = 1.0 - beta2[a] * coupled.gain[a] / z;
    }

    let n = problem.channels.tx_antennas;
    let precoders: Vec<CMat> = (0..layout.users())
        .map(|k| {
            let mut p = CMat::zeros(n, layout.streams_of(k));
            for (i, a) in layout.range(k).enumerate() {
                p.set_column(i, &state.g_tilde[a].scale(beta2[a].sqrt()));
            }
            p
        })
        .collect();
    let stats = mse::sigma_stats(&precoders, &problem.channels)?;
    let mmse_receiver_mse = stats
        .iter()
        .flat_map(|s| (0..s.sigma_bar.nrows()).map(move |i| s.sigma_bar[(i, i)].re))
        .collect();
    let rates = mse::average_rate(&precoders, &problem.channels)?;
    Ok(BcSolution {
        rho: state.rho.clone(),
        streams_per_user: layout.streams_per_user().to_vec(),
        precoders,
        total_power: beta2.iter().sum(),
        mac_total_power: state.total_power,
        stream_powers: beta2,
        stream_mse,
        receiver_scale,
        mmse_receiver_mse,
        rates,
    })
}

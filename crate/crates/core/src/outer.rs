//! Projected-gradient search over the per-stream rate split.
//!
//! Each outer iteration takes a gradient step on the per-stream targets `ϱ`,
//! projects every user's block back onto `{x ≥ 0, Σx = ρ_k}`, re-solves the
//! inner problem and keeps the result only if the total power went down;
//! otherwise the step is halved.

use std::f64::consts::LN_2;
use std::path::Path;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ScenarioConfig};
use crate::error::{Error, Result};
use crate::inner::{self, mac_to_bc, solve_inner, BcSolution, InnerOptions, MacState, Problem};
use crate::layout::StreamLayout;
use crate::mse::{coupling, PowerProfile};

/// Per-stream rate targets with the per-user sums they must respect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateAllocation {
    pub rho_streams: Vec<f64>,
    pub user_rates: Vec<f64>,
    pub active: Vec<bool>,
}

impl RateAllocation {
    pub fn new(layout: &StreamLayout, user_rates: &[f64], rho_streams: Vec<f64>) -> Result<Self> {
        if user_rates.len() != layout.users() || rho_streams.len() != layout.total_streams() {
            return Err(Error::Dimension("rate vectors do not match the stream layout".into()));
        }
        if rho_streams.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return Err(Error::Contract("per-stream targets must be finite and nonnegative".into()));
        }
        for k in 0..layout.users() {
            let sum: f64 = rho_streams[layout.range(k)].iter().sum();
            if (sum - user_rates[k]).abs() > 1e-12 * user_rates[k].max(1.0) {
                return Err(Error::Contract(format!(
                    "user {k}: stream targets sum to {sum}, expected {}",
                    user_rates[k]
                )));
            }
        }
        let active = rho_streams.iter().map(|&r| r > 0.0).collect();
        Ok(Self {
            rho_streams,
            user_rates: user_rates.to_vec(),
            active,
        })
    }

    /// `ρ_k / d_k` on every stream of user `k`.
    pub fn equal_split(layout: &StreamLayout, user_rates: &[f64]) -> Result<Self> {
        let mut rho = Vec::with_capacity(layout.total_streams());
        for (k, &rate) in user_rates.iter().enumerate().take(layout.users()) {
            let d = layout.streams_of(k);
            rho.extend(std::iter::repeat_n(rate / d as f64, d));
        }
        Self::new(layout, user_rates, project(&rho, layout, user_rates)?)
    }

    /// Uniformly random point of each user's simplex.
    pub fn random_split(layout: &StreamLayout, user_rates: &[f64], seed: u64) -> Result<Self> {
        let mut rng = channel::seeded_rng(seed, channel::rng_stream::RANDOM_SPLIT);
        let mut rho = Vec::with_capacity(layout.total_streams());
        for (k, &rate) in user_rates.iter().enumerate().take(layout.users()) {
            let weights: Vec<f64> = (0..layout.streams_of(k))
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect();
            let total: f64 = weights.iter().sum();
            rho.extend(weights.iter().map(|w| rate * w / total));
        }
        Self::new(layout, user_rates, project(&rho, layout, user_rates)?)
    }
}

/// Jacobian of the per-stream MMSEs in the powers, the target diagonal and
/// the resulting power gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub j_f: DMatrix<f64>,
    /// `2^{-ϱ_a}`.
    pub target_diag: Vec<f64>,
    /// `∂P_T / ∂ϱ_a`.
    pub grad: Vec<f64>,
}

/// `J_f[a][b] = ∂ MMSE_a / ∂ ξ_b` at the state's powers.
///
/// Switched-off streams use their virtual unit power in their own row. They
/// radiate nothing, so the columns of switched-off streams are zero outside
/// their own diagonal entry and the active block equals the Jacobian of the
/// problem without them.
pub fn compute_jacobian(state: &MacState) -> Result<DMatrix<f64>> {
    let coupled = coupling(&state.g_tilde, &state.moments)?;
    let profile = state.profile();
    let d = state.xi.len();
    let mut j = DMatrix::zeros(d, d);
    for a in 0..d {
        let y = coupled.y(&profile, a);
        let own = profile.own[a];
        let c = coupled.gain[a];
        j[(a, a)] = -c / (y * y) * (y - own * coupled.cross[(a, a)]);
        for b in 0..d {
            if b != a && state.active[b] {
                j[(a, b)] = own * c * coupled.cross[(a, b)] / (y * y);
            }
        }
    }
    Ok(j)
}

/// `∂P_T/∂ϱ_a = -ln 2 · 1^T J_f^{-1} diag(2^{-ϱ}) e_a`.
pub fn power_gradient(j_f: &DMatrix<f64>, rho_streams: &[f64]) -> Result<Vec<f64>> {
    let d = rho_streams.len();
    if j_f.shape() != (d, d) {
        return Err(Error::Dimension("Jacobian and target vector disagree".into()));
    }
    let ones = DVector::from_element(d, 1.0);
    let x = j_f
        .transpose()
        .lu()
        .solve(&ones)
        .ok_or_else(|| Error::Numeric("Jacobian is singular".into()))?;
    Ok((0..d).map(|a| -LN_2 * x[a] * (-rho_streams[a]).exp2()).collect())
}

pub fn gradient_bundle(state: &MacState) -> Result<GradientBundle> {
    let j_f = compute_jacobian(state)?;
    let grad = power_gradient(&j_f, &state.rho)?;
    Ok(GradientBundle {
        j_f,
        target_diag: state.targets(),
        grad,
    })
}

/// Euclidean projection of `rho_prime` onto `{x ≥ 0, Σx = rho_k}`.
///
/// The water level is re-solved over the surviving entries until none of
/// them would go negative. The largest entry absorbs the final rounding
/// residual so the sum is exact to the last bit that matters.
pub fn project_per_user(rho_prime: &[f64], rho_k: f64) -> Vec<f64> {
    let n = rho_prime.len();
    if n == 0 {
        return Vec::new();
    }
    let sum: f64 = rho_prime.iter().sum();
    if rho_prime.iter().all(|&x| x >= 0.0) && (sum - rho_k).abs() <= 1e-12 * rho_k.max(1.0) {
        return rho_prime.to_vec();
    }
    let mut support = vec![true; n];
    let level = loop {
        let count = support.iter().filter(|&&s| s).count();
        let kept: f64 = (0..n).filter(|&i| support[i]).map(|i| rho_prime[i]).sum();
        let level = (kept - rho_k) / count as f64;
        let mut dropped = false;
        for i in 0..n {
            if support[i] && rho_prime[i] - level <= 0.0 {
                support[i] = false;
                dropped = true;
            }
        }
        if !dropped || !support.iter().any(|&s| s) {
            break level;
        }
    };
    let mut out: Vec<f64> = (0..n)
        .map(|i| if support[i] { rho_prime[i] - level } else { 0.0 })
        .collect();
    if !support.iter().any(|&s| s) {
        // Only reachable through rounding when everything ties; split evenly.
        out.iter_mut().for_each(|x| *x = rho_k / n as f64);
    }
    let residual = rho_k - out.iter().sum::<f64>();
    let top = (0..n).max_by(|&i, &j| out[i].total_cmp(&out[j])).expect("nonempty");
    out[top] += residual;
    out
}

/// [`project_per_user`] applied to every user's block.
pub fn project(rho_prime: &[f64], layout: &StreamLayout, user_rates: &[f64]) -> Result<Vec<f64>> {
    if rho_prime.len() != layout.total_streams() || user_rates.len() != layout.users() {
        return Err(Error::Dimension("projection inputs do not match the layout".into()));
    }
    let mut out = Vec::with_capacity(rho_prime.len());
    for (k, &rate) in user_rates.iter().enumerate() {
        out.extend(project_per_user(&rho_prime[layout.range(k)], rate));
    }
    Ok(out)
}

/// Marks streams outside `active_mask` as switched off: zero actual power,
/// receive filters recomputed with unit virtual power, no interference.
pub fn apply_dummy_filters(state: &MacState, active_mask: &[bool]) -> Result<MacState> {
    let d = state.xi.len();
    if active_mask.len() != d {
        return Err(Error::Dimension("mask length differs from stream count".into()));
    }
    if active_mask == state.active.as_slice() {
        return Ok(state.clone());
    }
    let mut next = state.clone();
    next.active = active_mask.to_vec();
    for a in 0..d {
        if !active_mask[a] {
            next.xi[a] = 0.0;
            next.rho[a] = 0.0;
        }
    }
    let profile = PowerProfile::with_dummies(&next.xi, &next.active);
    let fresh = inner::update_receivers(&next.moments, &profile)?;
    for a in 0..d {
        if !active_mask[a] {
            next.g_tilde[a] = fresh[a].clone();
        }
    }
    let coupled = coupling(&next.g_tilde, &next.moments)?;
    next.achieved_mmse = coupled.mmse(&PowerProfile::plain(&next.xi));
    for a in 0..d {
        let y = coupled.y(&PowerProfile::plain(&next.xi), a);
        next.equalizer[a] = next.g_tilde[a].dotc(&next.moments.mu[a]) * (next.xi[a].sqrt() / y);
    }
    next.total_power = next.xi.iter().sum();
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Equal,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterOptions {
    pub step_size: f64,
    pub gamma: f64,
    pub max_outer_iters: usize,
    pub max_step_halvings: usize,
    pub init: InitMode,
    pub seed: u64,
    pub inner: InnerOptions,
}

impl OuterOptions {
    pub fn from_config(config: &ScenarioConfig) -> Self {
        Self {
            step_size: config.step_size,
            gamma: config.gamma,
            max_outer_iters: config.max_outer_iters,
            max_step_halvings: config.max_step_halvings,
            init: InitMode::Equal,
            seed: config.seed,
            inner: InnerOptions {
                tol: config.inner_tol,
                init_seed: config.seed,
                ..InnerOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// 0 for the initial solve, then one per accepted step.
    pub iteration: usize,
    pub total_power: f64,
    pub rho: Vec<f64>,
    pub xi: Vec<f64>,
    /// Step size that produced this row; 0 for the initial row.
    pub step_size: f64,
    pub active: Vec<bool>,
    pub halvings: usize,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OuterTrace {
    pub rows: Vec<TraceRow>,
}

impl OuterTrace {
    pub fn accepted_iterations(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    pub fn powers(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.total_power).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterStatus {
    /// Power improvement of the last accepted step was at most `gamma`, or
    /// the projection left the targets unchanged.
    Converged,
    /// No step size within the halving cap reduced the power.
    Stalled,
    IterationCap,
}

#[derive(Debug, Clone)]
pub struct OuterResult {
    pub status: OuterStatus,
    pub allocation: RateAllocation,
    pub state: MacState,
    pub solution: BcSolution,
    pub trace: OuterTrace,
}

/// Everything needed to continue a run after the last accepted iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub user_rates: Vec<f64>,
    pub state: MacState,
    pub trace: OuterTrace,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Initial inner solve at the configured starting split. Infeasible targets
/// surface as [`Error::Infeasible`] with the feasibility report attached.
pub fn initial_state(problem: &Problem, user_rates: &[f64], options: &OuterOptions) -> Result<MacState> {
    let allocation = match options.init {
        InitMode::Equal => RateAllocation::equal_split(&problem.layout, user_rates)?,
        InitMode::Random => RateAllocation::random_split(&problem.layout, user_rates, options.seed)?,
    };
    match solve_inner(&allocation.rho_streams, problem, None, &options.inner) {
        Err(Error::NotConverged {
            iterations,
            best: Some(best),
        }) => {
            warn!("initial inner solve stopped after {iterations} cycles before converging");
            Ok(*best)
        }
        other => other,
    }
}

/// Runs the outer loop from scratch, optionally writing a checkpoint after
/// every accepted iteration.
pub fn minimize_power(
    problem: &Problem,
    user_rates: &[f64],
    options: &OuterOptions,
    checkpoint: Option<&Path>,
) -> Result<OuterResult> {
    let state = initial_state(problem, user_rates, options)?;
    let trace = OuterTrace {
        rows: vec![row(0, &state, 0.0, 0)],
    };
    let start = Checkpoint {
        iteration: 0,
        user_rates: user_rates.to_vec(),
        state,
        trace,
    };
    if let Some(path) = checkpoint {
        start.save(path)?;
    }
    continue_from(problem, start, options, checkpoint)
}

/// Continues a run from a checkpoint; the result is identical to an
/// uninterrupted run with the same options.
pub fn continue_from(
    problem: &Problem,
    checkpoint: Checkpoint,
    options: &OuterOptions,
    checkpoint_path: Option<&Path>,
) -> Result<OuterResult> {
    let Checkpoint {
        mut iteration,
        user_rates,
        mut state,
        mut trace,
    } = checkpoint;
    let layout = &problem.layout;
    if state.rho.len() != layout.total_streams() || user_rates.len() != layout.users() {
        return Err(Error::Dimension("checkpoint does not match the problem".into()));
    }
    let status = loop {
        if iteration >= options.max_outer_iters {
            break OuterStatus::IterationCap;
        }
        iteration += 1;
        let grad = gradient_bundle(&state)?.grad;
        let mut step = options.step_size;
        let mut accepted = None;
        let mut unchanged = false;
        for halvings in 0..=options.max_step_halvings {
            let moved: Vec<f64> = state.rho.iter().zip(&grad).map(|(r, g)| r - step * g).collect();
            let rho = project(&moved, layout, &user_rates)?;
            if rho == state.rho {
                unchanged = true;
                break;
            }
            match solve_inner(&rho, problem, Some(&state), &options.inner) {
                Ok(trial) if trial.total_power < state.total_power => {
                    accepted = Some((trial, step, halvings));
                    break;
                }
                Ok(trial) => debug!(
                    "outer {iteration}: step {step:e} gives power {:e} >= {:e}",
                    trial.total_power, state.total_power
                ),
                Err(Error::Infeasible { .. }) | Err(Error::NotConverged { best: None, .. }) => {
                    debug!("outer {iteration}: step {step:e} infeasible")
                }
                Err(Error::NotConverged { best: Some(best), .. }) if best.total_power < state.total_power => {
                    accepted = Some((*best, step, halvings));
                    break;
                }
                Err(Error::NotConverged { .. }) => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }
        if unchanged {
            break OuterStatus::Converged;
        }
        let Some((next, step, halvings)) = accepted else {
            break OuterStatus::Stalled;
        };
        let improvement = state.total_power - next.total_power;
        info!(
            "outer {iteration}: power {:.10e} (step {step:e}, {halvings} halvings)",
            next.total_power
        );
        trace.rows.push(row(iteration, &next, step, halvings));
        state = next;
        if let Some(path) = checkpoint_path {
            Checkpoint {
                iteration,
                user_rates: user_rates.clone(),
                state: state.clone(),
                trace: trace.clone(),
            }
            .save(path)?;
        }
        if improvement <= options.gamma {
            break OuterStatus::Converged;
        }
    };
    let allocation = RateAllocation::new(layout, &user_rates, state.rho.clone())?;
    let solution = mac_to_bc(&state, problem)?;
    Ok(OuterResult {
        status,
        allocation,
        state,
        solution,
        trace,
    })
}

fn row(iteration: usize, state: &MacState, step_size: f64, halvings: usize) -> TraceRow {
    TraceRow {
        iteration,
        total_power: state.total_power,
        rho: state.rho.clone(),
        xi: state.xi.clone(),
        step_size,
        active: state.active.clone(),
        halvings,
        inner_iterations: state.iterations,
    }
}

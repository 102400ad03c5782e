//! Transmit power minimization for the multi-stream MIMO broadcast channel
//! with per-user average-rate constraints and statistical channel knowledge
//! at the transmitter.
//!
//! The downlink problem is solved in its dual uplink. [`inner::solve_inner`]
//! finds the cheapest filters for fixed per-stream MMSE targets and
//! [`outer::minimize_power`] searches the per-stream rate split by projected
//! gradient descent. [`harness`] wires both into reproducible experiments.

// `!(x > 0.0)` is used on purpose so that NaN takes the error branch. Index loops
// mirror the stream indices of the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod channel;
pub mod error;
pub mod harness;
pub mod inner;
pub mod layout;
pub mod linalg;
pub mod mse;
pub mod outer;

#[cfg(test)]
mod testutil;

pub use channel::{
    build_scenario, estimate_moments, sample_channels, whiten_channel, ChannelSampleSet, Moments, PartialCsi,
    ScenarioConfig, StreamPrecoders, UserCsi, WhitenedChannels,
};
pub use error::{Error, Result};
pub use harness::{run_experiment, validate_solution, ExperimentConfig, ExperimentOutcome, RunStatus, ValidationReport};
pub use inner::{mac_to_bc, solve_inner, BcSolution, InnerOptions, MacState, Problem};
pub use layout::StreamLayout;
pub use mse::{FeasibilityMatrix, FeasibilityReport, SigmaStats};
pub use outer::{
    minimize_power, project_per_user, GradientBundle, InitMode, OuterOptions, OuterResult, OuterStatus, OuterTrace,
    RateAllocation,
};

//! Continuous-time stochastic filtering toolkit.
//!
//! This crate estimates the hidden state of a Markov process — a finite-state
//! jump chain or a jump-diffusion on ℝⁿ — from noisy observations arriving
//! either as additive-Gaussian-noise increments or as point-process events
//! whose rate depends on the state. It provides:
//!
//! - [`model`]: signal/observation model types and the generator abstraction
//!   every filter consumes, plus registered analytic families (linear and
//!   double-well drifts; constant, linear, exponential, and Gaussian-bump
//!   rates) that carry exact derivatives and Gaussian-moment closures.
//! - [`sim`]: seeded, reproducible path and observation simulation on a fixed
//!   time grid (exact event times for chains, Euler–Maruyama for diffusions).
//! - [`exact`]: closed-form filters — discrete-time HMM and Kalman steps,
//!   and the continuous-time filters for linear-Gaussian models, finite-state
//!   chains under Gaussian noise, and finite-state chains under point-process
//!   observations, including the scalar log-odds form of the two-state
//!   decision problem.
//! - [`gaussian`]: Gaussian approximate filters for nonlinear models — the
//!   extended filter for Gaussian observations, its point-process analogue,
//!   and an assumed-density filter with analytic or Gauss–Hermite closures.
//! - [`particle`]: weighted (bootstrap) and unweighted (constant-gain
//!   feedback / ensemble) particle filters with resampling and effective
//!   sample size diagnostics.
//! - [`pde`]: a 1-D finite-difference solver for the density evolution
//!   equation and its filtering counterparts (normalized, unnormalized, and
//!   point-process forms) — the grid oracle the test suite measures against.
//! - [`scenario`] / [`harness`]: declarative JSON experiment configs, a
//!   deterministic parallel runner, metrics, and stable CSV/JSON outputs.
//!
//! # Conventions
//!
//! Observations are always consumed as increments `dY` (Gaussian case) or
//! event indicators `dN ∈ {0,1}` (point-process case) on a fixed grid of step
//! `dt`; filters advance one grid step per call and are pure functions of
//! `(belief, increment)`. All randomness descends from a single 64-bit master
//! seed through the documented splitting rule in [`rng`], so every run — and
//! every parallel trial within a run — is bit-reproducible.
//!
//! # Quick start
//!
//! Run any example with `cargo run --release --example <name>`; start with
//! `linear_tracking` (closed-form filter on a linear model) or
//! `double_well_tracking` (particle filters vs. the grid oracle on a bimodal
//! nonlinear model). The `ctfilter` binary drives the same machinery from
//! JSON configs: `ctfilter run configs/double_well.json`.

pub mod error;
pub mod exact;
pub mod gaussian;
pub mod harness;
pub mod model;
mod numeric;
pub mod particle;
pub mod pde;
pub mod rng;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};

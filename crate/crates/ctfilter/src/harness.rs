//! Experiment runner, metrics, and file outputs.
//!
//! [`run_scenario`] drives a [`ScenarioConfig`] end to end: every trial
//! simulates one signal path, attaches the configured observation channels,
//! runs **all** filters on that same observation record, computes metrics,
//! and writes its own output files. Trials execute in parallel up to the
//! worker count; within a trial, filters step sequentially over the grid.
//!
//! # Output layout
//!
//! One directory per run, holding
//!
//! - `trial{k:03}_path.csv` — the simulated state and observation record,
//! - `trial{k:03}_{label}.csv` — one row per grid point and filter:
//!   `t,estimate,spread[,ess]`,
//! - `trial{k:03}_{label}_step{s:06}.csv` — grid-filter densities every
//!   `density_stride` steps (when enabled),
//! - `summary.json` — aggregate metrics, deterministic,
//! - `timings.json` — wall-clock diagnostics, the **only** file whose bytes
//!   legitimately differ between reruns of the same config and seed.
//!
//! # Alignment conventions
//!
//! For continuous-time scenarios, `estimate[k]` summarizes the belief at
//! `t_k` given observation increments strictly before `t_k`; the increment
//! over `[t_k, t_k+dt)` is consumed after recording. The discrete-symbol
//! scenario uses the post-update convention instead — `estimate[k]` is the
//! posterior after absorbing symbol `k`, aligned with the state that
//! emitted it. Either way every metric array has exactly one entry per grid
//! point (`truth[k]` is the signal the estimate is judged against).
//!
//! # Determinism
//!
//! The trial with index `i` simulates from the scalar seed
//! `derive_seed(master, Signal, i)` and gives the filter in list slot `s`
//! the internal noise stream `(master, FilterNoise, i·2¹⁶ + s)`, so results
//! depend on neither the worker count nor the execution order, and adding
//! or removing a filter never perturbs the simulated data. Rerunning a
//! config with the same seed reproduces every output file byte for byte
//! (`timings.json` excepted).

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{
    hmm_filter_step, kalman_bucy_step, log_odds_step, pp_finite_state_step, DiscreteBelief,
    DiscreteHMMModel, GaussianBelief,
};
use crate::gaussian::{adf_pp_step, ekbf_step, pp_ekbf_step, GaussianClosureSpec};
use crate::model::{
    DriftFamily, GaussianObsModel, InitialLaw, JumpDiffusionModel, MarkovChainModel, ObsFamily,
    PointProcessObsModel,
};
use crate::particle::{
    bpf_propagate, bpf_reweight_gaussian, bpf_reweight_pp, fbpf_step, resample, ParticleEnsemble,
    ResampleSpec,
};
use crate::pde::{cfl_substeps, kushner_step, pp_kushner_step, GridDensity};
use crate::rng::{derive_seed, stream, StreamTag};
use crate::scenario::{FilterKind, ResolvedFilter, ResolvedScenario, ScenarioConfig, SignalSpec};
use crate::sim::{
    attach_gaussian_obs, attach_pp_obs, simulate_jump_diffusion, simulate_markov_chain, PathRecord,
};

/// Environment variable overriding the output directory.
pub const ENV_OUT_DIR: &str = "CTFILTER_OUT_DIR";
/// Environment variable overriding the worker count.
pub const ENV_WORKERS: &str = "CTFILTER_WORKERS";

// ---------------------------------------------------------------------------
// Run options and metrics
// ---------------------------------------------------------------------------

/// Invocation-level overrides. Precedence is CLI flag over environment
/// variable over config file; a `None` field defers to the next layer.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl RunOptions {
    /// Fills unset fields from [`ENV_OUT_DIR`] and [`ENV_WORKERS`]. A
    /// non-numeric worker override is a configuration error.
    pub fn apply_env(mut self) -> Result<Self> {
        if self.out_dir.is_none() {
            if let Ok(dir) = std::env::var(ENV_OUT_DIR) {
                self.out_dir = Some(PathBuf::from(dir));
            }
        }
        if self.workers.is_none() {
            if let Ok(val) = std::env::var(ENV_WORKERS) {
                let n: usize = val.parse().map_err(|_| {
                    Error::Config(format!("{ENV_WORKERS} must be a positive integer, got '{val}'"))
                })?;
                self.workers = Some(n);
            }
        }
        Ok(self)
    }
}

/// Root-mean-square error between aligned estimate and truth arrays.
pub fn metric_rmse(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(Error::Shape(format!(
            "rmse needs equal nonempty arrays, got {} and {}",
            estimates.len(),
            truth.len()
        )));
    }
    let sum: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t) * (e - t))
        .sum();
    Ok((sum / estimates.len() as f64).sqrt())
}

/// Fraction of positions where the label matches the truth.
pub fn metric_accuracy(labels: &[usize], truth: &[usize]) -> Result<f64> {
    if labels.len() != truth.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "accuracy needs equal nonempty arrays, got {} and {}",
            labels.len(),
            truth.len()
        )));
    }
    let hits = labels.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// L1 distance between two densities on the same grid (Δx-weighted).
pub fn metric_l1(a: &GridDensity, b: &GridDensity) -> Result<f64> {
    a.l1_distance(b)
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

/// One filter's trajectory and metrics over a single trial.
#[derive(Clone, Debug)]
pub struct FilterTrack {
    pub label: String,
    pub kind: FilterKind,
    /// Scalar point estimate per grid point (posterior mean, or the
    /// level-weighted mean for finite-state beliefs).
    pub estimate: Vec<f64>,
    /// Posterior standard deviation per grid point.
    pub spread: Vec<f64>,
    /// Effective sample size per grid point after each reweight and before
    /// any resampling (bootstrap filter only, else empty).
    pub ess: Vec<f64>,
    /// RMSE of `estimate` against the truth.
    pub rmse: f64,
    /// Per-step MAP accuracy (finite-state beliefs only).
    pub accuracy: Option<f64>,
    /// Whether the filter's final-time classification (MAP state, or the
    /// sign of the estimate for continuous states) matches the truth.
    pub decision_correct: bool,
    /// Time-averaged L1 distance to the run's grid-filter oracle density
    /// (particle filters, when a grid filter is configured).
    pub l1_to_oracle: Option<f64>,
    /// Steps whose covariance update needed a roundoff-scale eigenvalue
    /// clamp (Gaussian approximate filters).
    pub clamp_count: u64,
    /// Resampling events (bootstrap filter).
    pub resample_count: u64,
    /// Largest negative mass a grid filter clamped in one step.
    pub density_clamp_max: f64,
}

/// One trial: the simulated truth plus every filter's track.
#[derive(Clone, Debug)]
pub struct TrialResult {
    pub trial: usize,
    /// Scalar seed the trial simulated from.
    pub seed: u64,
    /// Grid times, one per step; every metric array is aligned to this.
    pub times: Vec<f64>,
    /// Scalar truth per grid point: the state value, the chain level, or
    /// the state index for the discrete-symbol scenario.
    pub truth: Vec<f64>,
    pub tracks: Vec<FilterTrack>,
    /// Present when the trial failed; the runner continues regardless.
    pub error: Option<String>,
    pub wall_seconds: f64,
}

/// Echo of the time grid in the summary file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SummaryGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
}

/// A failed trial's index and error text.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FailedTrial {
    pub trial: usize,
    pub error: String,
}

/// Per-filter aggregates over the run's successful trials.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FilterSummary {
    pub label: String,
    /// Mean per-trial RMSE.
    pub mean_rmse: Option<f64>,
    /// Mean per-step MAP accuracy (finite-state filters).
    pub accuracy: Option<f64>,
    /// Fraction of trials whose final-time classification was correct.
    pub decision_accuracy: Option<f64>,
    /// Mean time-averaged L1 distance to the grid oracle.
    pub mean_l1_to_oracle: Option<f64>,
    /// Smallest effective sample size seen at any step of any trial.
    pub min_ess: Option<f64>,
    /// Total resampling events.
    pub resample_total: Option<u64>,
    /// Total covariance eigenvalue clamps; 0 on every shipped scenario.
    pub clamp_total: u64,
    /// Largest per-step negative-mass clamp across grid-filter steps.
    pub density_clamp_max: f64,
}

/// Deterministic aggregate written to `summary.json`. Contains nothing
/// that varies between reruns (no wall times, no paths).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub n_trials: usize,
    pub grid: SummaryGrid,
    pub n_ok: usize,
    pub failed: Vec<FailedTrial>,
    pub filters: Vec<FilterSummary>,
}

/// Everything [`run_scenario`] produces, in memory.
#[derive(Debug)]
pub struct RunReport {
    pub summary: RunSummary,
    pub trials: Vec<TrialResult>,
    pub out_dir: PathBuf,
    pub total_seconds: f64,
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

/// Runs every trial of a scenario and writes the output directory.
///
/// Trial failures are attached to their [`TrialResult`] and listed in the
/// summary; the function itself fails only on configuration or setup
/// problems (unresolvable config, unwritable output directory).
pub fn run_scenario(config: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport> {
    let mut cfg = config.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = opts.trials {
        cfg.n_trials = trials;
    }
    if let Some(dir) = &opts.out_dir {
        cfg.output_dir = Some(dir.clone());
    }
    let resolved = cfg.resolve()?;

    std::fs::create_dir_all(&resolved.out_dir)?;

    let pool = {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(workers) = opts.workers {
            if workers == 0 {
                return Err(Error::Config("worker count must be at least 1".into()));
            }
            builder = builder.num_threads(workers);
        }
        builder
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
    };

    let start = Instant::now();
    let trials: Vec<TrialResult> = pool.install(|| {
        (0..resolved.n_trials)
            .into_par_iter()
            .map(|trial| run_trial(&resolved, trial))
            .collect()
    });
    let total_seconds = start.elapsed().as_secs_f64();

    let summary = summarize(&resolved, &trials);
    write_json(&resolved.out_dir.join("summary.json"), &summary)?;
    write_json(
        &resolved.out_dir.join("timings.json"),
        &Timings {
            total_seconds,
            trials: trials
                .iter()
                .map(|t| TrialTiming {
                    trial: t.trial,
                    seconds: t.wall_seconds,
                })
                .collect(),
        },
    )?;

    Ok(RunReport {
        summary,
        trials,
        out_dir: resolved.out_dir.clone(),
        total_seconds,
    })
}

#[derive(Serialize)]
struct Timings {
    total_seconds: f64,
    trials: Vec<TrialTiming>,
}

#[derive(Serialize)]
struct TrialTiming {
    trial: usize,
    seconds: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let mut file = std::fs::File::create(path)?;
    file.write_all(text.as_bytes())?;
    Ok(())
}

/// Builds the deterministic aggregate. Means iterate trials in index
/// order, so the bytes of `summary.json` never depend on scheduling.
fn summarize(resolved: &ResolvedScenario, trials: &[TrialResult]) -> RunSummary {
    let ok: Vec<&TrialResult> = trials.iter().filter(|t| t.error.is_none()).collect();
    let failed = trials
        .iter()
        .filter_map(|t| {
            t.error.as_ref().map(|e| FailedTrial {
                trial: t.trial,
                error: e.clone(),
            })
        })
        .collect();

    let mean = |values: Vec<f64>| -> Option<f64> {
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };

    let filters = resolved
        .filters
        .iter()
        .enumerate()
        .map(|(slot, rf)| {
            let tracks: Vec<&FilterTrack> = ok.iter().map(|t| &t.tracks[slot]).collect();
            let is_particle = matches!(rf.kind, FilterKind::Bpf | FilterKind::Fbpf);
            FilterSummary {
                label: rf.label.clone(),
                mean_rmse: mean(tracks.iter().map(|t| t.rmse).collect()),
                accuracy: mean(tracks.iter().filter_map(|t| t.accuracy).collect()),
                decision_accuracy: if tracks.is_empty() {
                    None
                } else {
                    Some(
                        tracks.iter().filter(|t| t.decision_correct).count() as f64
                            / tracks.len() as f64,
                    )
                },
                mean_l1_to_oracle: mean(tracks.iter().filter_map(|t| t.l1_to_oracle).collect()),
                min_ess: tracks
                    .iter()
                    .flat_map(|t| t.ess.iter().copied())
                    .fold(None, |acc: Option<f64>, e| {
                        Some(acc.map_or(e, |a| a.min(e)))
                    }),
                resample_total: if rf.kind == FilterKind::Bpf {
                    Some(tracks.iter().map(|t| t.resample_count).sum())
                } else {
                    None
                },
                clamp_total: tracks.iter().map(|t| t.clamp_count).sum(),
                density_clamp_max: tracks
                    .iter()
                    .map(|t| t.density_clamp_max)
                    .fold(0.0, f64::max),
            }
            .tap_clear_particle(is_particle)
        })
        .collect();

    RunSummary {
        scenario: resolved.kind.name().to_string(),
        seed: resolved.seed,
        n_trials: resolved.n_trials,
        grid: SummaryGrid {
            t0: resolved.grid.t0,
            dt: resolved.grid.dt,
            n_steps: resolved.grid.n_steps,
        },
        n_ok: ok.len(),
        failed,
        filters,
    }
}

impl FilterSummary {
    /// Drops particle-only fields from non-particle filters so the JSON
    /// stays honest (`min_ess` on a grid filter would be noise).
    fn tap_clear_particle(mut self, is_particle: bool) -> Self {
        if !is_particle {
            self.min_ess = None;
            self.resample_total = None;
        }
        self
    }
}

// ---------------------------------------------------------------------------
// One trial
// ---------------------------------------------------------------------------

/// Simulates, filters, measures, and writes one trial. Never panics on
/// model errors: failures come back inside the result.
fn run_trial(resolved: &ResolvedScenario, trial: usize) -> TrialResult {
    let start = Instant::now();
    let seed = derive_seed(resolved.seed, StreamTag::Signal, trial as u64);
    let mut result = TrialResult {
        trial,
        seed,
        times: Vec::new(),
        truth: Vec::new(),
        tracks: Vec::new(),
        error: None,
        wall_seconds: 0.0,
    };
    match execute_trial(resolved, trial, seed) {
        Ok((times, truth, tracks)) => {
            result.times = times;
            result.truth = truth;
            result.tracks = tracks;
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result.wall_seconds = start.elapsed().as_secs_f64();
    result
}

type TrialData = (Vec<f64>, Vec<f64>, Vec<FilterTrack>);

fn execute_trial(resolved: &ResolvedScenario, trial: usize, seed: u64) -> Result<TrialData> {
    let grid = resolved.grid;
    let (path, truth) = simulate_record(resolved, seed)?;

    let mut states: Vec<FilterState> = Vec::with_capacity(resolved.filters.len());
    for (slot, rf) in resolved.filters.iter().enumerate() {
        let rng = stream(
            resolved.seed,
            StreamTag::FilterNoise,
            (trial as u64) << 16 | slot as u64,
        );
        states.push(FilterState::build(resolved, rf, rng)?);
    }
    let oracle_slot = resolved
        .filters
        .iter()
        .position(|f| matches!(f.kind, FilterKind::GridKushner | FilterKind::GridPpKushner));

    // The discrete-symbol scenario records after the update (posterior of
    // the emitting state); continuous scenarios record first, so the
    // estimate at t_k never peeks at the increment over [t_k, t_k + dt).
    let record_after = matches!(resolved.signal, SignalSpec::DiscreteHmm(_));

    let trial_dir = |label: &str, k: usize| -> PathBuf {
        resolved
            .out_dir
            .join(format!("trial{trial:03}_{label}_step{k:06}.csv"))
    };

    for k in 0..grid.n_steps {
        let t = grid.t(k);
        if record_after {
            for state in &mut states {
                state.advance(&path, k, t, grid.dt)?;
            }
        }
        let oracle = oracle_slot.map(|s| states[s].density_snapshot());
        for state in &mut states {
            state.record(oracle.as_ref().and_then(|d| d.as_ref()));
        }
        if resolved.density_stride > 0 && k % resolved.density_stride == 0 {
            for (state, rf) in states.iter().zip(&resolved.filters) {
                if let Some(dens) = state.density_snapshot() {
                    dens.write_csv(&trial_dir(&rf.label, k))?;
                }
            }
        }
        if !record_after {
            for state in &mut states {
                state.advance(&path, k, t, grid.dt)?;
            }
        }
    }

    let times: Vec<f64> = (0..grid.n_steps).map(|k| grid.t(k)).collect();
    let truth_indices = truth_labels(resolved, &path);
    let mut tracks = Vec::with_capacity(states.len());
    for (state, rf) in states.into_iter().zip(&resolved.filters) {
        tracks.push(state.finish(rf, &truth, truth_indices.as_deref())?);
    }

    path.write_csv(std::fs::File::create(
        resolved.out_dir.join(format!("trial{trial:03}_path.csv")),
    )?)?;
    for track in &tracks {
        write_track_csv(resolved, trial, track, &times)?;
    }

    Ok((times, truth, tracks))
}

/// Simulates the trial's signal and observations, returning the record and
/// the scalar truth series the estimates are judged against.
fn simulate_record(resolved: &ResolvedScenario, seed: u64) -> Result<(PathRecord, Vec<f64>)> {
    let grid = resolved.grid;
    match &resolved.signal {
        SignalSpec::DiscreteHmm(model) => {
            let (chain_states, symbols) = model.simulate(grid.n_steps, seed);
            // Row k holds the state that emitted symbol k, so estimates,
            // truth, and symbols share one index.
            let states: Vec<Vec<f64>> =
                (0..grid.n_steps).map(|k| vec![chain_states[k + 1] as f64]).collect();
            let truth = states.iter().map(|row| row[0]).collect();
            let path = PathRecord {
                grid,
                states,
                dy: Vec::new(),
                dn: Vec::new(),
                symbols: Some(symbols),
                seed,
            };
            Ok((path, truth))
        }
        SignalSpec::Chain { chain, levels, .. } => {
            let mut path = simulate_markov_chain(chain, grid, seed)?;
            if let Some(obs) = &resolved.pp_obs {
                attach_pp_obs(&mut path, obs)?;
            }
            if let Some(obs) = &resolved.gaussian_obs {
                attach_gaussian_obs(&mut path, obs)?;
            }
            let truth = path
                .states
                .iter()
                .map(|row| levels[row[0] as usize])
                .collect();
            Ok((path, truth))
        }
        SignalSpec::Diffusion(model) => {
            let mut path = simulate_jump_diffusion(model, grid, seed)?;
            if let Some(obs) = &resolved.gaussian_obs {
                attach_gaussian_obs(&mut path, obs)?;
            }
            if let Some(obs) = &resolved.pp_obs {
                attach_pp_obs(&mut path, obs)?;
            }
            let truth = path.states.iter().map(|row| row[0]).collect();
            Ok((path, truth))
        }
    }
}

/// True state indices for MAP-accuracy metrics (finite-state signals).
fn truth_labels(resolved: &ResolvedScenario, path: &PathRecord) -> Option<Vec<usize>> {
    match &resolved.signal {
        SignalSpec::DiscreteHmm(_) | SignalSpec::Chain { .. } => {
            Some(path.states.iter().map(|row| row[0] as usize).collect())
        }
        SignalSpec::Diffusion(_) => None,
    }
}

fn write_track_csv(
    resolved: &ResolvedScenario,
    trial: usize,
    track: &FilterTrack,
    times: &[f64],
) -> Result<()> {
    let path = resolved
        .out_dir
        .join(format!("trial{trial:03}_{}.csv", track.label));
    let mut w = csv::Writer::from_writer(std::fs::File::create(path)?);
    let with_ess = !track.ess.is_empty();
    if with_ess {
        w.write_record(["t", "estimate", "spread", "ess"])?;
    } else {
        w.write_record(["t", "estimate", "spread"])?;
    }
    for k in 0..times.len() {
        let mut row = vec![
            format!("{}", times[k]),
            format!("{}", track.estimate[k]),
            format!("{}", track.spread[k]),
        ];
        if with_ess {
            row.push(format!("{}", track.ess[k]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Per-filter stepping state
// ---------------------------------------------------------------------------

/// Accumulators shared by every filter variant.
struct TrackBuf {
    estimate: Vec<f64>,
    spread: Vec<f64>,
    ess: Vec<f64>,
    map_labels: Vec<usize>,
    l1_sum: f64,
    l1_count: u64,
    clamp_count: u64,
    resample_count: u64,
    density_clamp_max: f64,
}

impl TrackBuf {
    fn new(n_steps: usize) -> Self {
        TrackBuf {
            estimate: Vec::with_capacity(n_steps),
            spread: Vec::with_capacity(n_steps),
            ess: Vec::new(),
            map_labels: Vec::new(),
            l1_sum: 0.0,
            l1_count: 0,
            clamp_count: 0,
            resample_count: 0,
            density_clamp_max: 0.0,
        }
    }
}

/// One filter's mutable state while a trial steps over the grid.
enum FilterState {
    Hmm {
        model: DiscreteHMMModel,
        belief: DiscreteBelief,
        buf: TrackBuf,
    },
    FiniteState {
        chain: MarkovChainModel,
        rate_table: DMatrix<f64>,
        levels: Vec<f64>,
        belief: DiscreteBelief,
        buf: TrackBuf,
    },
    LogOdds {
        hazard: f64,
        r_plus: f64,
        r_minus: f64,
        levels: Vec<f64>,
        alpha: f64,
        buf: TrackBuf,
    },
    KalmanBucy {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma_x: DMatrix<f64>,
        noise_inv: DMatrix<f64>,
        belief: GaussianBelief,
        buf: TrackBuf,
    },
    Ekbf {
        model: JumpDiffusionModel,
        obs: GaussianObsModel,
        belief: GaussianBelief,
        buf: TrackBuf,
    },
    PpEkbf {
        model: JumpDiffusionModel,
        obs: PointProcessObsModel,
        belief: GaussianBelief,
        buf: TrackBuf,
    },
    AdfPp {
        model: JumpDiffusionModel,
        obs: PointProcessObsModel,
        closure: GaussianClosureSpec,
        belief: GaussianBelief,
        buf: TrackBuf,
    },
    Bpf {
        model: JumpDiffusionModel,
        gauss: Option<GaussianObsModel>,
        pp: Option<PointProcessObsModel>,
        ens: ParticleEnsemble,
        spec: ResampleSpec,
        rng: ChaCha12Rng,
        buf: TrackBuf,
    },
    Fbpf {
        model: JumpDiffusionModel,
        obs: GaussianObsModel,
        ens: ParticleEnsemble,
        rng: ChaCha12Rng,
        buf: TrackBuf,
    },
    Grid {
        model: JumpDiffusionModel,
        gauss: Option<GaussianObsModel>,
        pp: Option<PointProcessObsModel>,
        dens: GridDensity,
        buf: TrackBuf,
    },
}

/// Mean and standard deviation of a two-point belief on `levels`.
fn two_state_stats(p0: f64, levels: &[f64]) -> (f64, f64) {
    let mean = p0 * levels[0] + (1.0 - p0) * levels[1];
    let second = p0 * levels[0] * levels[0] + (1.0 - p0) * levels[1] * levels[1];
    (mean, (second - mean * mean).max(0.0).sqrt())
}

fn initial_gaussian(model: &JumpDiffusionModel) -> Result<GaussianBelief> {
    match model.initial() {
        InitialLaw::Gaussian { mean, cov } => GaussianBelief::new(mean.clone(), cov.clone()),
        InitialLaw::Dirac(x) => {
            GaussianBelief::new(x.clone(), DMatrix::zeros(x.len(), x.len()))
        }
        InitialLaw::Custom { .. } => Err(Error::Config(
            "Gaussian-family filters need a Gaussian or deterministic initial law".into(),
        )),
    }
}

impl FilterState {
    fn build(
        resolved: &ResolvedScenario,
        rf: &ResolvedFilter,
        mut rng: ChaCha12Rng,
    ) -> Result<Self> {
        let buf = TrackBuf::new(resolved.grid.n_steps);
        match rf.kind {
            FilterKind::HmmExact => match &resolved.signal {
                SignalSpec::DiscreteHmm(model) => Ok(FilterState::Hmm {
                    belief: DiscreteBelief::new(model.initial().clone())?,
                    model: model.clone(),
                    buf,
                }),
                _ => unreachable!("checked during resolve"),
            },
            FilterKind::PpFiniteState => match &resolved.signal {
                SignalSpec::Chain {
                    chain,
                    levels,
                    rate_table: Some(table),
                } => Ok(FilterState::FiniteState {
                    belief: DiscreteBelief::new(chain.initial_dist().clone())?,
                    chain: chain.clone(),
                    rate_table: table.clone(),
                    levels: levels.clone(),
                    buf,
                }),
                _ => unreachable!("checked during resolve"),
            },
            FilterKind::LogOdds => match &resolved.signal {
                SignalSpec::Chain {
                    chain,
                    levels,
                    rate_table: Some(table),
                } => Ok(FilterState::LogOdds {
                    hazard: chain.generator()[(0, 1)],
                    r_plus: table[(0, 0)],
                    r_minus: table[(0, 1)],
                    levels: levels.clone(),
                    alpha: DiscreteBelief::new(chain.initial_dist().clone())?.log_odds()?,
                    buf,
                }),
                _ => unreachable!("checked during resolve"),
            },
            FilterKind::KalmanBucy => match (&resolved.signal, &resolved.gaussian_obs) {
                (SignalSpec::Diffusion(model), Some(obs)) => {
                    let Some(DriftFamily::Linear { a }) = model.drift_family() else {
                        unreachable!("checked during resolve")
                    };
                    let Some(ObsFamily::Linear { b }) = obs.obs_family() else {
                        return Err(Error::Config(
                            "kalman_bucy needs a linear observation family".into(),
                        ));
                    };
                    let x0 = DVector::zeros(1);
                    Ok(FilterState::KalmanBucy {
                        a: DMatrix::from_element(1, 1, a),
                        b: DMatrix::from_element(1, 1, b),
                        sigma_x: model.noise_cov(&x0, resolved.grid.t0),
                        noise_inv: obs.noise_inv().clone(),
                        belief: initial_gaussian(model)?,
                        buf,
                    })
                }
                _ => unreachable!("checked during resolve"),
            },
            FilterKind::Ekbf => match (&resolved.signal, &resolved.gaussian_obs) {
                (SignalSpec::Diffusion(model), Some(obs)) => Ok(FilterState::Ekbf {
                    belief: initial_gaussian(model)?,
                    model: model.clone(),
                    obs: obs.clone(),
                    buf,
                }),
                _ => unreachable!("checked during resolve"),
            },
            FilterKind::PpEkbf => match (&resolved.signal, &resolved.pp_obs) {
                (SignalSpec::Diffusion(model), Some(obs)) => Ok(FilterState::PpEkbf {
                    belief: initial_gaussian(model)?,
                    model: model.clone(),
                    obs: obs.clone(),
                    buf,
                }),
                _ => unreachable!("checked during resolve"),
            },
            FilterKind::AdfPp => match (&resolved.signal, &resolved.pp_obs) {
                (SignalSpec::Diffusion(model), Some(obs)) => Ok(FilterState::AdfPp {
                    belief: initial_gaussian(model)?,
                    model: model.clone(),
                    obs: obs.clone(),
                    closure: rf.closure,
                    buf,
                }),
                _ => unreachable!("checked during resolve"),
            },
            FilterKind::Bpf => match &resolved.signal {
                SignalSpec::Diffusion(model) => Ok(FilterState::Bpf {
                    ens: ParticleEnsemble::from_initial_law(
                        model.initial(),
                        rf.particles,
                        &mut rng,
                    )?,
                    model: model.clone(),
                    gauss: resolved.gaussian_obs.clone(),
                    pp: resolved.pp_obs.clone(),
                    spec: rf.resample,
                    rng,
                    buf,
                }),
                _ => unreachable!("checked during resolve"),
            },
            FilterKind::Fbpf => match (&resolved.signal, &resolved.gaussian_obs) {
                (SignalSpec::Diffusion(model), Some(obs)) => Ok(FilterState::Fbpf {
                    ens: ParticleEnsemble::from_initial_law(
                        model.initial(),
                        rf.particles,
                        &mut rng,
                    )?,
                    model: model.clone(),
                    obs: obs.clone(),
                    rng,
                    buf,
                }),
                _ => unreachable!("checked during resolve"),
            },
            FilterKind::GridKushner | FilterKind::GridPpKushner => match &resolved.signal {
                SignalSpec::Diffusion(model) => {
                    let InitialLaw::Gaussian { mean, cov } = model.initial() else {
                        return Err(Error::Config(
                            "grid filters need a Gaussian initial law".into(),
                        ));
                    };
                    let dens = GridDensity::from_gaussian(
                        rf.grid_span.0,
                        rf.grid_span.1,
                        rf.grid_cells,
                        mean[0],
                        cov[(0, 0)],
                    )?;
                    Ok(FilterState::Grid {
                        model: model.clone(),
                        gauss: if rf.kind == FilterKind::GridKushner {
                            resolved.gaussian_obs.clone()
                        } else {
                            None
                        },
                        pp: if rf.kind == FilterKind::GridPpKushner {
                            resolved.pp_obs.clone()
                        } else {
                            None
                        },
                        dens,
                        buf,
                    })
                }
                _ => unreachable!("checked during resolve"),
            },
        }
    }

    /// The current density for oracle comparisons and stride output (grid
    /// filters only).
    fn density_snapshot(&self) -> Option<GridDensity> {
        match self {
            FilterState::Grid { dens, .. } => Some(dens.clone()),
            _ => None,
        }
    }

    /// Appends the current belief summary to the track buffers.
    fn record(&mut self, oracle: Option<&GridDensity>) {
        match self {
            FilterState::Hmm { belief, buf, model } => {
                // Estimate is the expected state index (two states: P(1)).
                let mean: f64 = (0..model.n_states())
                    .map(|i| i as f64 * belief.prob(i))
                    .sum();
                let second: f64 = (0..model.n_states())
                    .map(|i| (i * i) as f64 * belief.prob(i))
                    .sum();
                buf.estimate.push(mean);
                buf.spread.push((second - mean * mean).max(0.0).sqrt());
                buf.map_labels.push(belief.map_state());
            }
            FilterState::FiniteState {
                belief,
                levels,
                buf,
                ..
            } => {
                let (mean, sd) = two_state_stats(belief.prob(0), levels);
                buf.estimate.push(mean);
                buf.spread.push(sd);
                buf.map_labels.push(belief.map_state());
            }
            FilterState::LogOdds {
                alpha,
                levels,
                buf,
                ..
            } => {
                // α = log(p₀/p₁) ⇒ p₀ = 1/(1 + e^{−α}).
                let p0 = 1.0 / (1.0 + (-*alpha).exp());
                let (mean, sd) = two_state_stats(p0, levels);
                buf.estimate.push(mean);
                buf.spread.push(sd);
                buf.map_labels.push(usize::from(*alpha < 0.0));
            }
            FilterState::KalmanBucy { belief, buf, .. }
            | FilterState::Ekbf { belief, buf, .. }
            | FilterState::PpEkbf { belief, buf, .. }
            | FilterState::AdfPp { belief, buf, .. } => {
                buf.estimate.push(belief.mean1());
                buf.spread.push(belief.var1().max(0.0).sqrt());
            }
            FilterState::Bpf { ens, buf, .. } | FilterState::Fbpf { ens, buf, .. } => {
                buf.estimate.push(ens.weighted_mean()[0]);
                buf.spread.push(ens.weighted_cov()[(0, 0)].max(0.0).sqrt());
                if let Some(dens) = oracle {
                    if let Ok(hist) =
                        ens.weighted_histogram(dens.xmin(), dens.xmax(), dens.n_cells())
                    {
                        let dx = dens.dx();
                        let l1: f64 = hist
                            .iter()
                            .zip(dens.values())
                            .map(|(h, p)| (h - p).abs() * dx)
                            .sum();
                        buf.l1_sum += l1;
                        buf.l1_count += 1;
                    }
                }
            }
            FilterState::Grid { dens, buf, .. } => {
                buf.estimate.push(dens.mean());
                buf.spread.push(dens.variance().max(0.0).sqrt());
            }
        }
    }

    /// Consumes the observation row `k` (and, for continuous filters, one
    /// prediction step of length `dt`).
    fn advance(&mut self, path: &PathRecord, k: usize, t: f64, dt: f64) -> Result<()> {
        match self {
            FilterState::Hmm { model, belief, buf: _ } => {
                let symbols = path
                    .symbols
                    .as_ref()
                    .ok_or_else(|| Error::Shape("record carries no symbols".into()))?;
                *belief = hmm_filter_step(model, belief, symbols[k])?;
            }
            FilterState::FiniteState {
                chain,
                rate_table,
                belief,
                ..
            } => {
                *belief = pp_finite_state_step(chain, rate_table, belief, &path.dn[k], dt)?;
            }
            FilterState::LogOdds {
                hazard,
                r_plus,
                r_minus,
                alpha,
                ..
            } => {
                let dn = [path.dn[k][0], path.dn[k][1]];
                *alpha = log_odds_step(*alpha, *hazard, *r_plus, *r_minus, dn, dt);
            }
            FilterState::KalmanBucy {
                a,
                b,
                sigma_x,
                noise_inv,
                belief,
                buf: _,
            } => {
                let dy = DVector::from_column_slice(&path.dy[k]);
                *belief = kalman_bucy_step(a, b, sigma_x, noise_inv, belief, &dy, dt)?;
            }
            FilterState::Ekbf {
                model,
                obs,
                belief,
                buf,
            } => {
                let dy = DVector::from_column_slice(&path.dy[k]);
                let step = ekbf_step(belief, model, obs, &dy, t, dt)?;
                *belief = step.belief;
                buf.clamp_count += u64::from(step.clamped);
            }
            FilterState::PpEkbf {
                model,
                obs,
                belief,
                buf,
            } => {
                let step = pp_ekbf_step(belief, model, obs, &path.dn[k], t, dt)?;
                *belief = step.belief;
                buf.clamp_count += u64::from(step.clamped);
            }
            FilterState::AdfPp {
                model,
                obs,
                closure,
                belief,
                buf,
            } => {
                let step = adf_pp_step(belief, model, obs, closure, &path.dn[k], t, dt)?;
                *belief = step.belief;
                buf.clamp_count += u64::from(step.clamped);
            }
            FilterState::Bpf {
                model,
                gauss,
                pp,
                ens,
                spec,
                rng,
                buf,
            } => {
                // Itô convention: the increment over [t, t+dt) weights the
                // particles where they stood at t, before propagation.
                if let Some(obs) = gauss {
                    let dy = DVector::from_column_slice(&path.dy[k]);
                    bpf_reweight_gaussian(ens, obs, &dy, t, dt)?;
                }
                if let Some(obs) = pp {
                    bpf_reweight_pp(ens, obs, &path.dn[k], dt)?;
                }
                let ess = ens.ess();
                buf.ess.push(ess);
                if spec.should_trigger(ess, ens.len()) {
                    resample(ens, spec, rng)?;
                    buf.resample_count += 1;
                }
                bpf_propagate(ens, model, t, dt, rng)?;
            }
            FilterState::Fbpf {
                model,
                obs,
                ens,
                rng,
                buf: _,
            } => {
                let dy = DVector::from_column_slice(&path.dy[k]);
                fbpf_step(ens, model, obs, &dy, t, dt, rng)?;
            }
            FilterState::Grid {
                model,
                gauss,
                pp,
                dens,
                buf,
            } => {
                let substeps = cfl_substeps(dens, model, t, dt)?;
                let clamped = if let Some(obs) = gauss {
                    let dy = DVector::from_column_slice(&path.dy[k]);
                    kushner_step(dens, model, obs, &dy, t, dt, substeps)?
                } else if let Some(obs) = pp {
                    pp_kushner_step(dens, model, obs, &path.dn[k], t, dt, substeps)?
                } else {
                    return Err(Error::Config(
                        "grid filter has no observation channel".into(),
                    ));
                };
                buf.density_clamp_max = buf.density_clamp_max.max(clamped);
            }
        }
        Ok(())
    }

    /// Closes the track: computes the aggregate metrics for this trial.
    fn finish(
        self,
        rf: &ResolvedFilter,
        truth: &[f64],
        truth_indices: Option<&[usize]>,
    ) -> Result<FilterTrack> {
        let buf = match self {
            FilterState::Hmm { buf, .. }
            | FilterState::FiniteState { buf, .. }
            | FilterState::LogOdds { buf, .. }
            | FilterState::KalmanBucy { buf, .. }
            | FilterState::Ekbf { buf, .. }
            | FilterState::PpEkbf { buf, .. }
            | FilterState::AdfPp { buf, .. }
            | FilterState::Bpf { buf, .. }
            | FilterState::Fbpf { buf, .. }
            | FilterState::Grid { buf, .. } => buf,
        };
        let rmse = metric_rmse(&buf.estimate, truth)?;
        let accuracy = match (&buf.map_labels, truth_indices) {
            (labels, Some(idx)) if !labels.is_empty() => Some(metric_accuracy(labels, idx)?),
            _ => None,
        };
        let decision_correct = if buf.map_labels.is_empty() {
            let est = *buf.estimate.last().expect("nonempty grid");
            let tru = *truth.last().expect("nonempty grid");
            est.signum() == tru.signum()
        } else {
            let idx = truth_indices.expect("labels imply a finite-state signal");
            buf.map_labels.last() == idx.last()
        };
        Ok(FilterTrack {
            label: rf.label.clone(),
            kind: rf.kind,
            estimate: buf.estimate,
            spread: buf.spread,
            ess: buf.ess,
            rmse,
            accuracy,
            decision_correct,
            l1_to_oracle: if buf.l1_count > 0 {
                Some(buf.l1_sum / buf.l1_count as f64)
            } else {
                None
            },
            clamp_count: buf.clamp_count,
            resample_count: buf.resample_count,
            density_clamp_max: buf.density_clamp_max,
        })
    }
}

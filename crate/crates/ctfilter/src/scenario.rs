//! Declarative experiment configuration.
//!
//! A scenario is a single JSON document naming a preset model family, the
//! time grid, the trial count and master seed, and the list of filters to
//! run on each simulated trial. [`ScenarioConfig`] is the serde image of
//! that document; [`ScenarioConfig::resolve`] validates it and builds the
//! concrete model objects the runner in [`crate::harness`] consumes.
//!
//! # Presets
//!
//! Four presets cover the shipped experiments; `custom` opens the same
//! machinery to arbitrary registered families:
//!
//! | name              | signal                                   | observations              |
//! |-------------------|------------------------------------------|---------------------------|
//! | `hmm_binary`      | two-state discrete-time chain            | noisy binary symbols      |
//! | `piet_clicks`     | two-state continuous chain (levels ±1)   | two Poisson click streams |
//! | `double_well`     | bistable diffusion `f(x) = −a·x(x²−1)`   | linear + Gaussian noise   |
//! | `linear_gaussian` | stable linear diffusion `f(x) = a·x`     | linear + Gaussian noise   |
//! | `custom`          | scalar diffusion from registered families| any configured section    |
//!
//! Preset parameters can be overridden field by field: a `model` or
//! `observations` subsection given in the document replaces the preset's
//! corresponding subsection wholesale (no deep merge), every omitted
//! subsection keeps its preset value.
//!
//! # Document shape
//!
//! ```json
//! {
//!   "scenario": "double_well",
//!   "seed": 13,
//!   "n_trials": 50,
//!   "grid": { "t0": 0.0, "dt": 1e-3, "horizon": 10.0 },
//!   "output_dir": "out/double_well",
//!   "model": {
//!     "drift": { "family": "double_well", "params": { "a": 4.0 } },
//!     "noise_var": 2.0,
//!     "initial": { "mean": 0.0, "var": 1.0 }
//!   },
//!   "observations": {
//!     "gaussian": { "family": "linear", "params": { "b": 1.0 }, "noise_var": 0.1 }
//!   },
//!   "filters": [
//!     { "name": "ekbf" },
//!     { "name": "bpf", "particles": 1000, "resample_ess": 0.5 },
//!     { "name": "fbpf", "particles": 1000 }
//!   ]
//! }
//! ```
//!
//! Unknown keys anywhere in the document are configuration errors, as is a
//! filter option that does not apply to its filter (for example `particles`
//! on `ekbf`): silent acceptance of a misspelled knob would run a different
//! experiment than the one written down.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::DiscreteHMMModel;
use crate::gaussian::GaussianClosureSpec;
use crate::model::{
    DriftFamily, GaussianObsModel, InitialLaw, JumpDiffusionModel, MarkovChainModel, ObsFamily,
    PointProcessObsModel, RateFamily,
};
use crate::particle::{ResampleScheme, ResampleSpec};
use crate::sim::TimeGrid;

/// Largest admissible `dt · max-rate` product. Event thinning and the
/// master-equation Euler step both carry an O(rate·dt) bias, so configs
/// beyond this are rejected at load rather than silently degraded.
pub const MAX_RATE_DT: f64 = 0.1;

// ---------------------------------------------------------------------------
// Config document
// ---------------------------------------------------------------------------

/// Preset selector; see the module docs for the table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    HmmBinary,
    PietClicks,
    DoubleWell,
    LinearGaussian,
    Custom,
}

impl ScenarioKind {
    /// Every selectable scenario, in listing order.
    pub fn all() -> &'static [ScenarioKind] {
        &[
            ScenarioKind::HmmBinary,
            ScenarioKind::PietClicks,
            ScenarioKind::DoubleWell,
            ScenarioKind::LinearGaussian,
            ScenarioKind::Custom,
        ]
    }

    /// Config-file name of the preset.
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::HmmBinary => "hmm_binary",
            ScenarioKind::PietClicks => "piet_clicks",
            ScenarioKind::DoubleWell => "double_well",
            ScenarioKind::LinearGaussian => "linear_gaussian",
            ScenarioKind::Custom => "custom",
        }
    }

    /// One-line description for `list-scenarios`.
    pub fn description(self) -> &'static str {
        match self {
            ScenarioKind::HmmBinary => {
                "two-state discrete-time chain observed through noisy binary symbols; \
                 exact forward filter"
            }
            ScenarioKind::PietClicks => {
                "two-state continuous chain (levels ±1) driving two Poisson click streams; \
                 finite-state filter and its scalar log-odds form"
            }
            ScenarioKind::DoubleWell => {
                "bistable diffusion dX = −a·X(X²−1)dt + G dB with linear Gaussian \
                 observations; linearized, bootstrap, and feedback particle filters"
            }
            ScenarioKind::LinearGaussian => {
                "stable linear diffusion with linear Gaussian observations; closed-form \
                 filter plus every approximation that should collapse onto it"
            }
            ScenarioKind::Custom => {
                "scalar diffusion assembled from registered drift/rate families; all \
                 sections supplied by the config"
            }
        }
    }

    /// Ready-to-run config for the preset (`None` for `custom`, which has
    /// no defaults). These are the documents shipped under `configs/`.
    pub fn default_config(self) -> Option<ScenarioConfig> {
        let (seed, n_trials, grid, filters) = match self {
            ScenarioKind::HmmBinary => (
                11,
                200,
                GridConfig {
                    t0: 0.0,
                    dt: 1.0,
                    horizon: 64.0,
                },
                vec![FilterConfig::named(FilterKind::HmmExact)],
            ),
            ScenarioKind::PietClicks => (
                12,
                200,
                GridConfig {
                    t0: 0.0,
                    dt: 1e-3,
                    horizon: 2.0,
                },
                vec![
                    FilterConfig::named(FilterKind::PpFiniteState),
                    FilterConfig::named(FilterKind::LogOdds),
                ],
            ),
            ScenarioKind::DoubleWell => (
                13,
                50,
                GridConfig {
                    t0: 0.0,
                    dt: 1e-3,
                    horizon: 10.0,
                },
                vec![
                    FilterConfig::named(FilterKind::Ekbf),
                    FilterConfig {
                        particles: Some(1000),
                        ..FilterConfig::named(FilterKind::Bpf)
                    },
                    FilterConfig {
                        particles: Some(1000),
                        ..FilterConfig::named(FilterKind::Fbpf)
                    },
                ],
            ),
            ScenarioKind::LinearGaussian => (
                14,
                20,
                GridConfig {
                    t0: 0.0,
                    dt: 1e-3,
                    horizon: 5.0,
                },
                vec![
                    FilterConfig::named(FilterKind::KalmanBucy),
                    FilterConfig::named(FilterKind::Ekbf),
                    FilterConfig {
                        particles: Some(500),
                        ..FilterConfig::named(FilterKind::Bpf)
                    },
                    FilterConfig {
                        particles: Some(500),
                        ..FilterConfig::named(FilterKind::Fbpf)
                    },
                ],
            ),
            ScenarioKind::Custom => return None,
        };
        Some(ScenarioConfig {
            scenario: self,
            seed,
            n_trials,
            grid,
            output_dir: Some(PathBuf::from(format!("out/{}", self.name()))),
            model: ModelSection::default(),
            observations: ObsSection::default(),
            filters,
            density_stride: 0,
        })
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Time grid section: `n_steps` is derived as `⌊horizon/dt⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t0: f64,
    pub dt: f64,
    pub horizon: f64,
}

/// A registered analytic family plus its numeric parameters, e.g.
/// `{"family": "double_well", "params": {"a": 4.0}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub family: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

/// Scalar Gaussian initial law for diffusion scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub mean: f64,
    pub var: f64,
}

/// Signal-model section. Presets fill every field; a config needs to
/// mention only what it overrides. `params` carries scenario-level knobs
/// (chain and emission probabilities, click rates); diffusion scenarios
/// instead parameterize through `drift`/`noise_var`/`initial`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub params: BTreeMap<String, f64>,
    pub drift: Option<FamilySpec>,
    pub noise_var: Option<f64>,
    pub initial: Option<InitialSpec>,
}

/// Gaussian observation channel: `dY = h(x)dt + noise`, `h` from a
/// registered family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianObsSpec {
    pub family: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub noise_var: f64,
}

/// Point-process observation section: one rate family per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointProcessObsSpec {
    pub channels: Vec<FamilySpec>,
    /// Reference intensity of the common dominating measure; it cancels in
    /// every normalized filter and only anchors unnormalized diagnostics.
    #[serde(default = "default_reference_rate")]
    pub reference_rate: f64,
}

fn default_reference_rate() -> f64 {
    1.0
}

/// Observation-model section; either or both channels may be present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObsSection {
    pub gaussian: Option<GaussianObsSpec>,
    pub point_process: Option<PointProcessObsSpec>,
}

/// Estimators the runner knows how to drive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    /// Exact discrete-time forward filter (`hmm_binary` only).
    HmmExact,
    /// Closed-form linear-Gaussian filter (linear drift + linear obs).
    KalmanBucy,
    /// Exact finite-state filter under point-process observations.
    PpFiniteState,
    /// Scalar log-odds recursion for the symmetric two-state click task.
    LogOdds,
    /// Linearized Gaussian filter for diffusion + Gaussian observations.
    Ekbf,
    /// Linearized Gaussian filter for diffusion + point-process events.
    PpEkbf,
    /// Assumed-density filter with analytic or quadrature closures.
    AdfPp,
    /// Bootstrap particle filter (weighted, with resampling).
    Bpf,
    /// Feedback particle filter with the constant-gain approximation.
    Fbpf,
    /// Finite-difference density filter, Gaussian observations.
    GridKushner,
    /// Finite-difference density filter, point-process observations.
    GridPpKushner,
}

impl FilterKind {
    /// Config-file name; doubles as the output-file label.
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::HmmExact => "hmm_exact",
            FilterKind::KalmanBucy => "kalman_bucy",
            FilterKind::PpFiniteState => "pp_finite_state",
            FilterKind::LogOdds => "log_odds",
            FilterKind::Ekbf => "ekbf",
            FilterKind::PpEkbf => "pp_ekbf",
            FilterKind::AdfPp => "adf_pp",
            FilterKind::Bpf => "bpf",
            FilterKind::Fbpf => "fbpf",
            FilterKind::GridKushner => "grid_kushner",
            FilterKind::GridPpKushner => "grid_pp_kushner",
        }
    }

    fn is_particle(self) -> bool {
        matches!(self, FilterKind::Bpf | FilterKind::Fbpf)
    }

    fn is_grid(self) -> bool {
        matches!(self, FilterKind::GridKushner | FilterKind::GridPpKushner)
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Resampling scheme selector in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleSchemeConfig {
    Systematic,
    Multinomial,
}

/// Closure selector for the assumed-density filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosureConfig {
    /// Closed-form Gaussian moments of the registered families.
    Analytic,
    /// Gauss–Hermite quadrature (`quadrature_order` points).
    GaussHermite,
}

/// One filter entry: the kind plus whichever options apply to it. Options
/// set on a filter that cannot use them are configuration errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub name: FilterKind,
    /// Ensemble size (`bpf`, `fbpf`); default 1000.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    /// ESS/M threshold below which `bpf` resamples; default 0.5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample_ess: Option<f64>,
    /// Resampling scheme for `bpf`; default systematic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample_scheme: Option<ResampleSchemeConfig>,
    /// Moment closure for `adf_pp`; default Gauss–Hermite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closure: Option<ClosureConfig>,
    /// Gauss–Hermite point count for `adf_pp`; default 21.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrature_order: Option<usize>,
    /// Cell count for grid filters; default 400.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_cells: Option<usize>,
    /// `[xmin, xmax]` for grid filters; presets carry a default span.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_span: Option<[f64; 2]>,
}

impl FilterConfig {
    /// Entry with every option left at its default.
    pub fn named(name: FilterKind) -> Self {
        FilterConfig {
            name,
            particles: None,
            resample_ess: None,
            resample_scheme: None,
            closure: None,
            quadrature_order: None,
            grid_cells: None,
            grid_span: None,
        }
    }
}

/// One experiment, as written in a JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    /// Master seed; every stream in the run derives from it.
    pub seed: u64,
    pub n_trials: usize,
    pub grid: GridConfig,
    /// Where the runner writes its files; overridable from the CLI and the
    /// `CTFILTER_OUT_DIR` environment variable, defaults to
    /// `out/<scenario>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "ModelSection::is_empty")]
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "ObsSection::is_empty")]
    pub observations: ObsSection,
    pub filters: Vec<FilterConfig>,
    /// Write grid-filter density CSVs every this many steps (0 = never).
    #[serde(default)]
    pub density_stride: usize,
}

impl ModelSection {
    fn is_empty(&self) -> bool {
        *self == ModelSection::default()
    }
}

impl ObsSection {
    fn is_empty(&self) -> bool {
        *self == ObsSection::default()
    }
}

// ---------------------------------------------------------------------------
// Resolved form
// ---------------------------------------------------------------------------

/// The signal model a scenario simulates and filters.
#[derive(Clone)]
pub enum SignalSpec {
    /// Discrete-time chain emitting symbols (`hmm_binary`).
    DiscreteHmm(DiscreteHMMModel),
    /// Continuous-time chain; `levels[i]` is the numeric value state `i`
    /// represents, `rate_table[(j, i)]` the channel-`j` event rate in state
    /// `i` (present when point-process observations are configured).
    Chain {
        chain: MarkovChainModel,
        levels: Vec<f64>,
        rate_table: Option<DMatrix<f64>>,
    },
    /// Scalar jump-diffusion.
    Diffusion(JumpDiffusionModel),
}

/// A filter entry with every option made concrete.
#[derive(Clone, Debug)]
pub struct ResolvedFilter {
    pub kind: FilterKind,
    /// Output-file stem; repeats of a kind get `-2`, `-3`, … suffixes.
    pub label: String,
    pub particles: usize,
    pub resample: ResampleSpec,
    pub closure: GaussianClosureSpec,
    pub grid_cells: usize,
    pub grid_span: (f64, f64),
}

impl fmt::Debug for SignalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalSpec::DiscreteHmm(m) => {
                write!(f, "DiscreteHmm({} states)", m.n_states())
            }
            SignalSpec::Chain { chain, levels, .. } => {
                write!(f, "Chain({} states, levels {levels:?})", chain.n_states())
            }
            SignalSpec::Diffusion(m) => write!(f, "Diffusion(dim {})", m.dim()),
        }
    }
}

/// A validated scenario with constructed models, ready for the runner.
pub struct ResolvedScenario {
    pub kind: ScenarioKind,
    pub grid: TimeGrid,
    pub seed: u64,
    pub n_trials: usize,
    pub out_dir: PathBuf,
    pub signal: SignalSpec,
    pub gaussian_obs: Option<GaussianObsModel>,
    pub pp_obs: Option<PointProcessObsModel>,
    pub filters: Vec<ResolvedFilter>,
    pub density_stride: usize,
}

impl fmt::Debug for ResolvedScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResolvedScenario")
            .field("kind", &self.kind)
            .field("seed", &self.seed)
            .field("n_trials", &self.n_trials)
            .field("signal", &self.signal)
            .field("filters", &self.filters)
            .finish_non_exhaustive()
    }
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

/// Pulls `key` out of a scenario-parameter map, falling back to the preset
/// default.
fn scen_param(params: &BTreeMap<String, f64>, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

/// Rejects scenario-parameter keys outside `allowed`.
fn no_stray_params(params: &BTreeMap<String, f64>, allowed: &[&str], scenario: &str) -> Result<()> {
    for key in params.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "unknown model parameter '{key}' for scenario {scenario} \
                 (allowed: {})",
                allowed.join(", ")
            )));
        }
    }
    Ok(())
}

/// Wraps model-construction failures as configuration errors: everything
/// that can go wrong while resolving a document is a problem with the
/// document.
fn as_config<T>(context: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{context}: {msg}")),
        other => Error::Config(format!("{context}: {other}")),
    })
}

impl ScenarioConfig {
    /// Parses a JSON document, mapping syntax errors to configuration
    /// errors (a malformed file is a config problem, not a runtime one).
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    /// Reads and parses a config file.
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Validates the document and constructs the models it names.
    ///
    /// Every failure — unknown families, stray parameters, inapplicable
    /// filter options, incompatible filter/scenario pairs, a `dt·max-rate`
    /// product beyond [`MAX_RATE_DT`] — comes back as [`Error::Config`].
    pub fn resolve(&self) -> Result<ResolvedScenario> {
        if self.n_trials == 0 {
            return Err(Error::Config("n_trials must be at least 1".into()));
        }
        if self.filters.is_empty() {
            return Err(Error::Config("filter list is empty".into()));
        }
        let grid = as_config(
            "grid",
            TimeGrid::from_horizon(self.grid.t0, self.grid.dt, self.grid.horizon),
        )?;

        let (signal, gaussian_obs, pp_obs) = self.build_models()?;
        self.check_rates(&signal, pp_obs.as_ref())?;

        let mut filters = Vec::with_capacity(self.filters.len());
        for fc in &self.filters {
            filters.push(self.resolve_filter(fc, &signal, gaussian_obs.as_ref(), pp_obs.as_ref())?);
        }
        // Repeated kinds get numbered labels so output files stay distinct.
        for i in 0..filters.len() {
            let repeats = filters[..i]
                .iter()
                .filter(|f| f.kind == filters[i].kind)
                .count();
            if repeats > 0 {
                filters[i].label = format!("{}-{}", filters[i].kind.name(), repeats + 1);
            }
        }

        let out_dir = self
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("out/{}", self.scenario.name())));

        Ok(ResolvedScenario {
            kind: self.scenario,
            grid,
            seed: self.seed,
            n_trials: self.n_trials,
            out_dir,
            signal,
            gaussian_obs,
            pp_obs,
            filters,
            density_stride: self.density_stride,
        })
    }

    /// Builds signal and observation models, merging preset defaults with
    /// the document's overrides.
    #[allow(clippy::type_complexity)]
    fn build_models(
        &self,
    ) -> Result<(
        SignalSpec,
        Option<GaussianObsModel>,
        Option<PointProcessObsModel>,
    )> {
        match self.scenario {
            ScenarioKind::HmmBinary => {
                no_stray_params(&self.model.params, &["stay", "flip"], "hmm_binary")?;
                self.reject_diffusion_sections("hmm_binary")?;
                if self.observations != ObsSection::default() {
                    return Err(Error::Config(
                        "hmm_binary emits discrete symbols; it takes no observations section"
                            .into(),
                    ));
                }
                let stay = scen_param(&self.model.params, "stay", 0.9);
                let flip = scen_param(&self.model.params, "flip", 0.2);
                let model = as_config("hmm model", DiscreteHMMModel::binary(stay, flip))?;
                Ok((SignalSpec::DiscreteHmm(model), None, None))
            }
            ScenarioKind::PietClicks => {
                no_stray_params(
                    &self.model.params,
                    &["a", "r_plus", "r_minus"],
                    "piet_clicks",
                )?;
                self.reject_diffusion_sections("piet_clicks")?;
                if self.observations != ObsSection::default() {
                    return Err(Error::Config(
                        "piet_clicks builds its click channels from model.params; it takes \
                         no observations section"
                            .into(),
                    ));
                }
                let a = scen_param(&self.model.params, "a", 0.5);
                let r_plus = scen_param(&self.model.params, "r_plus", 20.0);
                let r_minus = scen_param(&self.model.params, "r_minus", 4.0);
                if !(r_plus > 0.0) || !(r_minus > 0.0) {
                    return Err(Error::Config(format!(
                        "click rates must be positive, got r_plus = {r_plus}, \
                         r_minus = {r_minus}"
                    )));
                }
                let chain = as_config("chain", MarkovChainModel::two_state_symmetric(a))?;
                // State 0 is the "+" side: channel 0 fires at r_plus there
                // and channel 1 at r_minus, swapped in state 1. This is the
                // orientation the log-odds recursion assumes.
                let rate_table =
                    DMatrix::from_row_slice(2, 2, &[r_plus, r_minus, r_minus, r_plus]);
                let obs = as_config(
                    "click channels",
                    PointProcessObsModel::new(
                        2,
                        Arc::new(move |x: &[f64], out: &mut [f64]| {
                            let plus_side = x[0] < 0.5;
                            out[0] = if plus_side { r_plus } else { r_minus };
                            out[1] = if plus_side { r_minus } else { r_plus };
                        }),
                        1.0,
                    ),
                )?;
                Ok((
                    SignalSpec::Chain {
                        chain,
                        levels: vec![1.0, -1.0],
                        rate_table: Some(rate_table),
                    },
                    None,
                    Some(obs),
                ))
            }
            ScenarioKind::DoubleWell | ScenarioKind::LinearGaussian | ScenarioKind::Custom => {
                if !self.model.params.is_empty() {
                    return Err(Error::Config(format!(
                        "scenario {} parameterizes through model.drift/noise_var/initial, \
                         not model.params",
                        self.scenario
                    )));
                }
                let (drift_default, noise_default, obs_default) = match self.scenario {
                    ScenarioKind::DoubleWell => (
                        Some(FamilySpec {
                            family: "double_well".into(),
                            params: BTreeMap::from([("a".into(), 4.0)]),
                        }),
                        Some(2.0),
                        Some(GaussianObsSpec {
                            family: "linear".into(),
                            params: BTreeMap::from([("b".into(), 1.0)]),
                            noise_var: 0.1,
                        }),
                    ),
                    ScenarioKind::LinearGaussian => (
                        Some(FamilySpec {
                            family: "linear".into(),
                            params: BTreeMap::from([("a".into(), -1.0)]),
                        }),
                        Some(1.0),
                        Some(GaussianObsSpec {
                            family: "linear".into(),
                            params: BTreeMap::from([("b".into(), 1.0)]),
                            noise_var: 1.0,
                        }),
                    ),
                    _ => (None, None, None),
                };

                let drift_spec = self
                    .model
                    .drift
                    .clone()
                    .or(drift_default)
                    .ok_or_else(|| Error::Config("custom scenario needs model.drift".into()))?;
                let noise_var = self.model.noise_var.or(noise_default).ok_or_else(|| {
                    Error::Config("custom scenario needs model.noise_var".into())
                })?;
                if !(noise_var > 0.0) || !noise_var.is_finite() {
                    return Err(Error::Config(format!(
                        "model.noise_var must be positive and finite, got {noise_var}"
                    )));
                }
                let initial = self
                    .model
                    .initial
                    .unwrap_or(InitialSpec { mean: 0.0, var: 1.0 });
                if !(initial.var > 0.0) || !initial.var.is_finite() || !initial.mean.is_finite() {
                    return Err(Error::Config(format!(
                        "model.initial must be a proper Gaussian, got mean {} var {}",
                        initial.mean, initial.var
                    )));
                }

                let drift =
                    as_config("drift", DriftFamily::from_config(&drift_spec.family, &drift_spec.params))?;
                let model = as_config(
                    "signal model",
                    JumpDiffusionModel::scalar(drift, noise_var.sqrt()),
                )?
                .with_initial(InitialLaw::Gaussian {
                    mean: DVector::from_element(1, initial.mean),
                    cov: DMatrix::from_element(1, 1, initial.var),
                });

                let gauss_spec = match (&self.observations.gaussian, self.scenario) {
                    (Some(spec), _) => Some(spec.clone()),
                    (None, ScenarioKind::Custom) => None,
                    (None, _) => obs_default,
                };
                let gaussian_obs = match gauss_spec {
                    Some(spec) => {
                        if !(spec.noise_var > 0.0) || !spec.noise_var.is_finite() {
                            return Err(Error::Config(format!(
                                "observations.gaussian.noise_var must be positive, got {}",
                                spec.noise_var
                            )));
                        }
                        let fam = as_config(
                            "observation family",
                            ObsFamily::from_config(&spec.family, &spec.params),
                        )?;
                        let ObsFamily::Linear { b } = fam;
                        Some(as_config(
                            "observation model",
                            GaussianObsModel::scalar_linear(b, spec.noise_var),
                        )?)
                    }
                    None => None,
                };

                let pp_obs = match &self.observations.point_process {
                    Some(spec) => {
                        if spec.channels.is_empty() {
                            return Err(Error::Config(
                                "observations.point_process.channels is empty".into(),
                            ));
                        }
                        if !(spec.reference_rate > 0.0) {
                            return Err(Error::Config(format!(
                                "reference_rate must be positive, got {}",
                                spec.reference_rate
                            )));
                        }
                        let mut families = Vec::with_capacity(spec.channels.len());
                        for ch in &spec.channels {
                            families.push(as_config(
                                "rate family",
                                RateFamily::from_config(&ch.family, &ch.params),
                            )?);
                        }
                        Some(as_config(
                            "point-process model",
                            PointProcessObsModel::from_families(families, spec.reference_rate),
                        )?)
                    }
                    None => None,
                };

                if gaussian_obs.is_none() && pp_obs.is_none() {
                    return Err(Error::Config(
                        "custom scenario needs at least one observations section".into(),
                    ));
                }
                Ok((SignalSpec::Diffusion(model), gaussian_obs, pp_obs))
            }
        }
    }

    fn reject_diffusion_sections(&self, scenario: &str) -> Result<()> {
        if self.model.drift.is_some()
            || self.model.noise_var.is_some()
            || self.model.initial.is_some()
        {
            return Err(Error::Config(format!(
                "scenario {scenario} has a finite-state signal; model.drift/noise_var/initial \
                 do not apply"
            )));
        }
        Ok(())
    }

    /// `dt · max-rate ≤ MAX_RATE_DT` across chain leave rates and
    /// point-process intensities (the latter checked over the widest
    /// configured grid span, or ±6 when no grid filter names one).
    fn check_rates(&self, signal: &SignalSpec, pp_obs: Option<&PointProcessObsModel>) -> Result<()> {
        let dt = self.grid.dt;
        let mut max_rate = 0.0_f64;
        match signal {
            SignalSpec::DiscreteHmm(_) => return Ok(()), // no continuous rates
            SignalSpec::Chain {
                chain, rate_table, ..
            } => {
                let a = chain.generator();
                for i in 0..chain.n_states() {
                    max_rate = max_rate.max(-a[(i, i)]);
                }
                if let Some(table) = rate_table {
                    max_rate = max_rate.max(table.max());
                }
            }
            SignalSpec::Diffusion(model) => {
                if let Some(obs) = pp_obs {
                    let span = self.widest_span();
                    let mut rates = vec![0.0; obs.obs_dim()];
                    for k in 0..=128 {
                        let x = span.0 + (span.1 - span.0) * k as f64 / 128.0;
                        obs.rate_into(&[x], &mut rates);
                        for &r in &rates {
                            max_rate = max_rate.max(r);
                        }
                    }
                }
                let _ = model; // jump channels are not configurable from documents
            }
        }
        if dt * max_rate > MAX_RATE_DT {
            return Err(Error::Config(format!(
                "dt·max-rate = {:.3} exceeds {MAX_RATE_DT} (dt = {dt}, max rate = {max_rate}); \
                 refine the grid or lower the rates",
                dt * max_rate
            )));
        }
        Ok(())
    }

    fn widest_span(&self) -> (f64, f64) {
        let mut span = (f64::INFINITY, f64::NEG_INFINITY);
        for fc in &self.filters {
            if let Some([lo, hi]) = fc.grid_span {
                span.0 = span.0.min(lo);
                span.1 = span.1.max(hi);
            }
        }
        if span.0 < span.1 {
            span
        } else {
            self.default_span()
        }
    }

    fn default_span(&self) -> (f64, f64) {
        match self.scenario {
            ScenarioKind::DoubleWell => (-3.0, 3.0),
            _ => (-6.0, 6.0),
        }
    }

    /// Resolves one filter entry: fills defaults, validates option values,
    /// rejects options that don't apply, and checks the filter can run on
    /// this scenario's signal and observations.
    fn resolve_filter(
        &self,
        fc: &FilterConfig,
        signal: &SignalSpec,
        gaussian_obs: Option<&GaussianObsModel>,
        pp_obs: Option<&PointProcessObsModel>,
    ) -> Result<ResolvedFilter> {
        let kind = fc.name;

        // Option relevance: a knob on a filter that ignores it is a typo.
        let mut stray = Vec::new();
        if fc.particles.is_some() && !kind.is_particle() {
            stray.push("particles");
        }
        if (fc.resample_ess.is_some() || fc.resample_scheme.is_some()) && kind != FilterKind::Bpf {
            stray.push("resample_ess/resample_scheme");
        }
        if (fc.closure.is_some() || fc.quadrature_order.is_some()) && kind != FilterKind::AdfPp {
            stray.push("closure/quadrature_order");
        }
        if (fc.grid_cells.is_some() || fc.grid_span.is_some()) && !kind.is_grid() {
            stray.push("grid_cells/grid_span");
        }
        if !stray.is_empty() {
            return Err(Error::Config(format!(
                "option(s) {} do not apply to filter {kind}",
                stray.join(", ")
            )));
        }

        let particles = fc.particles.unwrap_or(1000);
        if kind.is_particle() && particles < 2 {
            return Err(Error::Config(format!(
                "filter {kind} needs at least 2 particles, got {particles}"
            )));
        }
        let resample = as_config(
            "resample options",
            ResampleSpec::new(
                match fc.resample_scheme {
                    Some(ResampleSchemeConfig::Multinomial) => ResampleScheme::Multinomial,
                    _ => ResampleScheme::Systematic,
                },
                fc.resample_ess.unwrap_or(0.5),
            ),
        )?;
        let closure = match fc.closure {
            Some(ClosureConfig::Analytic) => {
                if fc.quadrature_order.is_some() {
                    return Err(Error::Config(
                        "quadrature_order does not apply to the analytic closure".into(),
                    ));
                }
                GaussianClosureSpec::AnalyticFamily
            }
            Some(ClosureConfig::GaussHermite) | None => as_config(
                "quadrature",
                GaussianClosureSpec::gauss_hermite(fc.quadrature_order.unwrap_or(21)),
            )?,
        };
        let grid_cells = fc.grid_cells.unwrap_or(400);
        if kind.is_grid() && grid_cells < 2 {
            return Err(Error::Config(format!(
                "filter {kind} needs at least 2 grid cells, got {grid_cells}"
            )));
        }
        let grid_span = match fc.grid_span {
            Some([lo, hi]) => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::Config(format!(
                        "grid_span must be a finite interval, got [{lo}, {hi}]"
                    )));
                }
                (lo, hi)
            }
            None => self.default_span(),
        };

        // Compatibility with the scenario's signal and observations.
        let incompatible = |why: &str| -> Error {
            Error::Config(format!(
                "filter {kind} cannot run on scenario {}: {why}",
                self.scenario
            ))
        };
        match kind {
            FilterKind::HmmExact => {
                if !matches!(signal, SignalSpec::DiscreteHmm(_)) {
                    return Err(incompatible("it needs the discrete-symbol chain"));
                }
            }
            FilterKind::PpFiniteState => match signal {
                SignalSpec::Chain {
                    rate_table: Some(_),
                    ..
                } => {}
                _ => {
                    return Err(incompatible(
                        "it needs a finite-state chain with point-process channels",
                    ))
                }
            },
            FilterKind::LogOdds => match signal {
                SignalSpec::Chain {
                    chain,
                    rate_table: Some(table),
                    ..
                } if chain.n_states() == 2
                    && table.nrows() == 2
                    && table[(0, 0)] == table[(1, 1)]
                    && table[(0, 1)] == table[(1, 0)] =>
                    {}
                _ => {
                    return Err(incompatible(
                        "it needs the symmetric two-state, two-channel click structure",
                    ))
                }
            },
            FilterKind::KalmanBucy => {
                let linear_drift = matches!(
                    signal,
                    SignalSpec::Diffusion(m) if matches!(m.drift_family(), Some(DriftFamily::Linear { .. }))
                );
                if !linear_drift || gaussian_obs.is_none() {
                    return Err(incompatible(
                        "it is exact only for a linear drift with Gaussian observations",
                    ));
                }
            }
            FilterKind::Ekbf | FilterKind::Fbpf | FilterKind::GridKushner => {
                if !matches!(signal, SignalSpec::Diffusion(_)) || gaussian_obs.is_none() {
                    return Err(incompatible(
                        "it needs a diffusion signal with Gaussian observations",
                    ));
                }
            }
            FilterKind::PpEkbf | FilterKind::AdfPp | FilterKind::GridPpKushner => {
                if !matches!(signal, SignalSpec::Diffusion(_)) || pp_obs.is_none() {
                    return Err(incompatible(
                        "it needs a diffusion signal with point-process observations",
                    ));
                }
            }
            FilterKind::Bpf => {
                if !matches!(signal, SignalSpec::Diffusion(_))
                    || (gaussian_obs.is_none() && pp_obs.is_none())
                {
                    return Err(incompatible(
                        "it needs a diffusion signal with at least one observation channel",
                    ));
                }
            }
        }

        Ok(ResolvedFilter {
            kind,
            label: kind.name().to_string(),
            particles,
            resample,
            closure,
            grid_cells,
            grid_span,
        })
    }
}

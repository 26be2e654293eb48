//! Signal and observation model types, and the generator abstraction.
//!
//! Two signal classes are supported:
//!
//! - [`MarkovChainModel`]: a continuous-time chain on finitely many states,
//!   specified by its generator matrix `A` (row sums zero, off-diagonals
//!   nonnegative). `A` acts on observables as `φ̇ = Aφ`; its transpose acts
//!   on probability vectors as the master equation `ṗ = Aᵀp`.
//! - [`JumpDiffusionModel`]: a process on ℝⁿ driven by drift `f(x,t)`,
//!   diffusion `G(x,t)`, and `k` jump channels with amplitudes `J(x,t)` and
//!   state-dependent rates `λ(x) ≥ 0`:
//!
//!   ```text
//!   dX = f(X,t) dt + G(X,t) dW + Σ_k J_k(X,t) dN_k,   dN_k ~ rate λ_k(X)
//!   ```
//!
//! Two observation classes mirror the signal split:
//!
//! - [`GaussianObsModel`]: increments `dY = h(X,t) dt + Σ_y^{1/2} dV`.
//! - [`PointProcessObsModel`]: counting observations with conditional rate
//!   `h_i(X)` per channel (doubly-stochastic point process).
//!
//! The generator of a jump-diffusion acts on a test function φ as
//!
//! ```text
//! 𝒜φ(x) = Σ_i f_i ∂_i φ + ½ Σ_ij (GGᵀ)_ij ∂_i∂_j φ + Σ_k λ_k(x) [φ(x+J_k) − φ(x)]
//! ```
//!
//! and satisfies the duality d/dt E[φ(X_t)] = E[𝒜φ(X_t)], which the test
//! suite checks by Monte Carlo. All model types are immutable after
//! construction and safe to share across threads; user callbacks must be
//! reentrant.

pub mod families;

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
pub use families::{DriftFamily, ObsFamily, RateFamily};

/// Tolerance for the structural checks on generators and probability vectors.
pub const GENERATOR_TOL: f64 = 1e-12;

/// Callback computing a state-and-time-dependent vector or matrix into a
/// caller-provided buffer (row-major for matrices). The buffer-passing form
/// keeps per-particle evaluation allocation-free in the hot loops.
pub type StateFn = dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync;

/// Callback computing per-channel nonnegative rates `λ(x)` (no time
/// dependence) into a caller-provided buffer.
pub type RateFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

// ---------------------------------------------------------------------------
// Finite-state chain
// ---------------------------------------------------------------------------

/// Continuous-time Markov chain on `n` states.
#[derive(Clone)]
pub struct MarkovChainModel {
    generator: DMatrix<f64>,
    initial_dist: DVector<f64>,
}

impl MarkovChainModel {
    /// Builds a chain model, validating the generator (rows sum to zero,
    /// off-diagonal entries nonnegative) and the initial distribution
    /// (nonnegative, sums to one), both to `1e-12`.
    pub fn new(generator: DMatrix<f64>, initial_dist: DVector<f64>) -> Result<Self> {
        let n = generator.nrows();
        if n == 0 || generator.ncols() != n {
            return Err(Error::Model(format!(
                "generator must be square and nonempty, got {}x{}",
                generator.nrows(),
                generator.ncols()
            )));
        }
        if initial_dist.len() != n {
            return Err(Error::Shape(format!(
                "initial distribution has {} entries for {} states",
                initial_dist.len(),
                n
            )));
        }
        for i in 0..n {
            let row_sum: f64 = generator.row(i).sum();
            if row_sum.abs() > GENERATOR_TOL {
                return Err(Error::Model(format!(
                    "generator row {i} sums to {row_sum:e}, expected 0"
                )));
            }
            for j in 0..n {
                if i != j && generator[(i, j)] < 0.0 {
                    return Err(Error::Model(format!(
                        "generator off-diagonal ({i},{j}) = {} is negative",
                        generator[(i, j)]
                    )));
                }
            }
        }
        let mass: f64 = initial_dist.sum();
        if (mass - 1.0).abs() > GENERATOR_TOL || initial_dist.iter().any(|&p| p < 0.0) {
            return Err(Error::Model(format!(
                "initial distribution must be nonnegative and sum to 1 (sum = {mass})"
            )));
        }
        Ok(Self {
            generator,
            initial_dist,
        })
    }

    /// Symmetric two-state chain with hazard `a` in both directions and a
    /// uniform initial distribution — the workhorse of the two-state
    /// decision scenarios.
    pub fn two_state_symmetric(a: f64) -> Result<Self> {
        if a < 0.0 {
            return Err(Error::Model(format!("hazard must be nonnegative, got {a}")));
        }
        Self::new(
            DMatrix::from_row_slice(2, 2, &[-a, a, a, -a]),
            DVector::from_element(2, 0.5),
        )
    }

    /// Number of states.
    pub fn n_states(&self) -> usize {
        self.generator.nrows()
    }

    /// The generator matrix `A` (acts on observables).
    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    /// The initial distribution `p(0)`.
    pub fn initial_dist(&self) -> &DVector<f64> {
        &self.initial_dist
    }

    /// `Aᵀ p`: one application of the master-equation right-hand side.
    pub fn master_rhs(&self, p: &DVector<f64>) -> DVector<f64> {
        self.generator.transpose() * p
    }
}

impl fmt::Debug for MarkovChainModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarkovChainModel")
            .field("n_states", &self.n_states())
            .finish()
    }
}

/// Applies the chain generator to an observable: returns `A·φ`.
///
/// For any constant φ the result is the zero vector (generator rows sum to
/// zero).
pub fn apply_generator_mc(model: &MarkovChainModel, phi: &DVector<f64>) -> Result<DVector<f64>> {
    if phi.len() != model.n_states() {
        return Err(Error::Shape(format!(
            "observable has {} entries for {} states",
            phi.len(),
            model.n_states()
        )));
    }
    Ok(model.generator() * phi)
}

// ---------------------------------------------------------------------------
// Jump-diffusion on ℝⁿ
// ---------------------------------------------------------------------------

/// Initial law of a continuous-state signal: a sampler plus, when known, the
/// Gaussian moments used to initialize approximate filters and to size
/// oracle grids.
#[derive(Clone)]
pub enum InitialLaw {
    /// Multivariate normal with the given mean and covariance.
    Gaussian {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    },
    /// Deterministic start.
    Dirac(DVector<f64>),
    /// Arbitrary sampler with an optional closed-form density.
    Custom {
        dim: usize,
        sampler: Arc<dyn Fn(&mut dyn RngCore) -> Vec<f64> + Send + Sync>,
        density: Option<Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
    },
}

impl InitialLaw {
    /// State dimension this law produces.
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Dirac(x) => x.len(),
            InitialLaw::Custom { dim, .. } => *dim,
        }
    }

    /// Draws one initial state.
    pub fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        match self {
            InitialLaw::Gaussian { mean, cov } => {
                let chol = Cholesky::new(cov.clone())
                    .expect("initial covariance validated at construction");
                let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
                mean + chol.l() * z
            }
            InitialLaw::Dirac(x) => x.clone(),
            InitialLaw::Custom { sampler, .. } => DVector::from_vec(sampler(rng)),
        }
    }

    /// Mean and covariance when the law is Gaussian or deterministic.
    pub fn gaussian_moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        match self {
            InitialLaw::Gaussian { mean, cov } => Some((mean.clone(), cov.clone())),
            InitialLaw::Dirac(x) => Some((x.clone(), DMatrix::zeros(x.len(), x.len()))),
            InitialLaw::Custom { .. } => None,
        }
    }
}

impl fmt::Debug for InitialLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialLaw::Gaussian { mean, .. } => write!(f, "Gaussian(dim {})", mean.len()),
            InitialLaw::Dirac(x) => write!(f, "Dirac(dim {})", x.len()),
            InitialLaw::Custom { dim, .. } => write!(f, "Custom(dim {dim})"),
        }
    }
}

/// Jump part of a [`JumpDiffusionModel`]: amplitudes (n×k, one column per
/// channel) and per-channel rates.
#[derive(Clone)]
struct JumpPart {
    n_channels: usize,
    amplitude: Arc<StateFn>,
    rate: Arc<RateFn>,
}

/// Signal model `dX = f dt + G dW + J dN` on ℝⁿ.
///
/// Constructed via [`JumpDiffusionModel::new`] plus the `with_*` builders.
/// The registered drift families in [`families`] attach exact Jacobians and
/// moment closures automatically; hand-rolled closures may attach a Jacobian
/// with [`with_drift_jacobian`](Self::with_drift_jacobian) to make the model
/// usable by the linearization filters.
#[derive(Clone)]
pub struct JumpDiffusionModel {
    dim: usize,
    drift: Arc<StateFn>,
    diffusion: Arc<StateFn>,
    jump: Option<JumpPart>,
    initial: InitialLaw,
    drift_jacobian: Option<Arc<StateFn>>,
    drift_family: Option<DriftFamily>,
}

impl JumpDiffusionModel {
    /// Builds a pure diffusion (no jump channels). `drift` writes `f(x,t)`
    /// into an `n`-buffer; `diffusion` writes `G(x,t)` into an `n·n`
    /// row-major buffer. The default initial law is standard normal.
    pub fn new(dim: usize, drift: Arc<StateFn>, diffusion: Arc<StateFn>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Model("state dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            drift,
            diffusion,
            jump: None,
            initial: InitialLaw::Gaussian {
                mean: DVector::zeros(dim),
                cov: DMatrix::identity(dim, dim),
            },
            drift_jacobian: None,
            drift_family: None,
        })
    }

    /// Convenience constructor for scalar models from registered families:
    /// drift family plus constant diffusion amplitude `g` (so the process
    /// noise intensity is `g²`).
    pub fn scalar(drift: DriftFamily, g: f64) -> Result<Self> {
        let fam = drift;
        let drift_fn: Arc<StateFn> = Arc::new(move |x, _t, out| out[0] = fam.eval(x[0]));
        let diff_fn: Arc<StateFn> = Arc::new(move |_x, _t, out| out[0] = g);
        let jac_fn: Arc<StateFn> = Arc::new(move |x, _t, out| out[0] = fam.derivative(x[0]));
        Ok(Self::new(1, drift_fn, diff_fn)?
            .with_drift_jacobian(jac_fn)
            .with_drift_family(fam))
    }

    /// Attaches jump channels: `amplitude` writes the n×k matrix `J(x,t)`
    /// (row-major, one column per channel); `rate` writes the k nonnegative
    /// channel rates `λ(x)`.
    pub fn with_jumps(
        mut self,
        n_channels: usize,
        amplitude: Arc<StateFn>,
        rate: Arc<RateFn>,
    ) -> Self {
        self.jump = Some(JumpPart {
            n_channels,
            amplitude,
            rate,
        });
        self
    }

    /// Replaces the initial law.
    pub fn with_initial(mut self, initial: InitialLaw) -> Self {
        assert_eq!(
            initial.dim(),
            self.dim,
            "initial law dimension must match the state dimension"
        );
        self.initial = initial;
        self
    }

    /// Attaches the drift Jacobian `F(x,t) = ∂f/∂x` (n×n row-major buffer),
    /// required by the linearization filters.
    pub fn with_drift_jacobian(mut self, jac: Arc<StateFn>) -> Self {
        self.drift_jacobian = Some(jac);
        self
    }

    /// Tags the drift as a registered analytic family, enabling closed-form
    /// Gaussian moment closures in the assumed-density filter.
    pub fn with_drift_family(mut self, family: DriftFamily) -> Self {
        self.drift_family = Some(family);
        self
    }

    /// State dimension `n`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of jump channels `k` (zero for pure diffusions).
    pub fn n_jump_channels(&self) -> usize {
        self.jump.as_ref().map_or(0, |j| j.n_channels)
    }

    /// The initial law.
    pub fn initial(&self) -> &InitialLaw {
        &self.initial
    }

    /// The registered drift family, when the drift is one.
    pub fn drift_family(&self) -> Option<DriftFamily> {
        self.drift_family
    }

    /// Evaluates the drift into `out` (length `n`), allocation-free.
    pub fn drift_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.drift)(x, t, out);
    }

    /// Evaluates the diffusion matrix into `out` (length `n·n`, row-major).
    pub fn diffusion_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.diffusion)(x, t, out);
    }

    /// Evaluates the jump amplitudes into `out` (length `n·k`, row-major);
    /// no-op when the model has no jump part.
    pub fn jump_amplitude_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        if let Some(jump) = &self.jump {
            (jump.amplitude)(x, t, out);
        }
    }

    /// Evaluates the jump rates into `out` (length `k`); no-op when the
    /// model has no jump part.
    pub fn jump_rate_into(&self, x: &[f64], out: &mut [f64]) {
        if let Some(jump) = &self.jump {
            (jump.rate)(x, out);
        }
    }

    /// Drift as an owned vector (allocating convenience for cold paths).
    pub fn drift_vec(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        self.drift_into(x.as_slice(), t, out.as_mut_slice());
        out
    }

    /// Diffusion `G` as an owned matrix.
    pub fn diffusion_mat(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let mut buf = vec![0.0; self.dim * self.dim];
        self.diffusion_into(x.as_slice(), t, &mut buf);
        DMatrix::from_row_slice(self.dim, self.dim, &buf)
    }

    /// Process noise intensity `Σ_x(x,t) = G Gᵀ`.
    pub fn noise_cov(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let g = self.diffusion_mat(x, t);
        &g * g.transpose()
    }

    /// Drift Jacobian `F(x,t)` as an owned matrix; errors when the model
    /// carries none.
    pub fn drift_jacobian_mat(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let jac = self.drift_jacobian.as_ref().ok_or_else(|| {
            Error::Model(
                "drift Jacobian unavailable: use a registered drift family or attach one with \
                 with_drift_jacobian"
                    .into(),
            )
        })?;
        let mut buf = vec![0.0; self.dim * self.dim];
        jac(x.as_slice(), t, &mut buf);
        Ok(DMatrix::from_row_slice(self.dim, self.dim, &buf))
    }

    /// Jump amplitudes `J(x,t)` as an owned n×k matrix (empty when no jumps).
    pub fn jump_amplitude_mat(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let k = self.n_jump_channels();
        let mut buf = vec![0.0; self.dim * k];
        self.jump_amplitude_into(x.as_slice(), t, &mut buf);
        DMatrix::from_row_slice(self.dim, k, &buf)
    }

    /// Jump rates `λ(x)` as an owned k-vector (empty when no jumps).
    pub fn jump_rate_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let k = self.n_jump_channels();
        let mut buf = vec![0.0; k];
        self.jump_rate_into(x.as_slice(), &mut buf);
        DVector::from_vec(buf)
    }
}

impl fmt::Debug for JumpDiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JumpDiffusionModel")
            .field("dim", &self.dim)
            .field("n_jump_channels", &self.n_jump_channels())
            .field("drift_family", &self.drift_family)
            .finish()
    }
}

// ---------------------------------------------------------------------------
// Observation models
// ---------------------------------------------------------------------------

/// Gaussian-noise observation model `dY = h(X,t) dt + Σ_y^{1/2} dV`.
#[derive(Clone)]
pub struct GaussianObsModel {
    obs_dim: usize,
    obs_fn: Arc<StateFn>,
    obs_jacobian: Option<Arc<StateFn>>,
    obs_family: Option<ObsFamily>,
    noise_cov: DMatrix<f64>,
    noise_chol: Cholesky<f64, Dyn>,
    noise_inv: DMatrix<f64>,
    state_table: Option<DMatrix<f64>>,
}

impl GaussianObsModel {
    /// Builds the model; `noise_cov` must be symmetric positive definite
    /// (validated by Cholesky).
    pub fn new(obs_dim: usize, obs_fn: Arc<StateFn>, noise_cov: DMatrix<f64>) -> Result<Self> {
        if obs_dim == 0 {
            return Err(Error::Model("observation dimension must be positive".into()));
        }
        if noise_cov.nrows() != obs_dim || noise_cov.ncols() != obs_dim {
            return Err(Error::Shape(format!(
                "noise covariance is {}x{}, expected {obs_dim}x{obs_dim}",
                noise_cov.nrows(),
                noise_cov.ncols()
            )));
        }
        let sym_err = (&noise_cov - noise_cov.transpose()).abs().max();
        if sym_err > 1e-10 {
            return Err(Error::Model(format!(
                "noise covariance is asymmetric (max deviation {sym_err:e})"
            )));
        }
        let noise_chol = Cholesky::new(noise_cov.clone()).ok_or_else(|| {
            Error::Model("noise covariance is not positive definite (Cholesky failed)".into())
        })?;
        let noise_inv = noise_chol.inverse();
        Ok(Self {
            obs_dim,
            obs_fn,
            obs_jacobian: None,
            obs_family: None,
            noise_cov,
            noise_chol,
            noise_inv,
            state_table: None,
        })
    }

    /// Observation model for a finite-state signal: column `i` of `table`
    /// (l×n) is the drift vector `h_i` emitted while the chain occupies
    /// state `i`. The state is read from the path's `[index as f64]`
    /// encoding; the table stays accessible to the finite-state filters via
    /// [`state_table`](Self::state_table).
    pub fn from_state_table(table: DMatrix<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        let (l, n) = (table.nrows(), table.ncols());
        if l == 0 || n == 0 {
            return Err(Error::Shape("state table must be nonempty".into()));
        }
        let lookup = table.clone();
        let obs_fn: Arc<StateFn> = Arc::new(move |x, _t, out| {
            let i = (x[0].round() as usize).min(lookup.ncols() - 1);
            for (r, o) in out.iter_mut().enumerate() {
                *o = lookup[(r, i)];
            }
        });
        let mut model = Self::new(l, obs_fn, noise_cov)?;
        model.state_table = Some(table);
        Ok(model)
    }

    /// Scalar linear observation `dY = b·x dt + √σ_y dV` from the linear
    /// family (carries its exact Jacobian).
    pub fn scalar_linear(b: f64, sigma_y: f64) -> Result<Self> {
        let obs_fn: Arc<StateFn> = Arc::new(move |x, _t, out| out[0] = b * x[0]);
        let jac: Arc<StateFn> = Arc::new(move |_x, _t, out| out[0] = b);
        Ok(Self::new(1, obs_fn, DMatrix::from_element(1, 1, sigma_y))?
            .with_obs_jacobian(jac)
            .with_obs_family(ObsFamily::Linear { b }))
    }

    /// Attaches the observation Jacobian `H(x,t) = ∂h/∂x` (l×n row-major
    /// buffer), required by the linearization filters.
    pub fn with_obs_jacobian(mut self, jac: Arc<StateFn>) -> Self {
        self.obs_jacobian = Some(jac);
        self
    }

    /// Tags the observation function as a registered analytic family.
    pub fn with_obs_family(mut self, family: ObsFamily) -> Self {
        self.obs_family = Some(family);
        self
    }

    /// Observation dimension `l`.
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// The registered observation family, when tagged.
    pub fn obs_family(&self) -> Option<ObsFamily> {
        self.obs_family
    }

    /// Noise covariance `Σ_y`.
    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    /// Cached `Σ_y⁻¹` (every filter correction uses it).
    pub fn noise_inv(&self) -> &DMatrix<f64> {
        &self.noise_inv
    }

    /// Cached lower Cholesky factor of `Σ_y` (observation simulation).
    pub fn noise_chol_l(&self) -> DMatrix<f64> {
        self.noise_chol.l()
    }

    /// Per-state drift table (l×n) when the model was built with
    /// [`from_state_table`](Self::from_state_table).
    pub fn state_table(&self) -> Option<&DMatrix<f64>> {
        self.state_table.as_ref()
    }

    /// Evaluates `h(x,t)` into `out` (length `l`), allocation-free.
    pub fn obs_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.obs_fn)(x, t, out);
    }

    /// `h(x,t)` as an owned vector.
    pub fn obs_vec(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.obs_dim);
        self.obs_into(x.as_slice(), t, out.as_mut_slice());
        out
    }

    /// Observation Jacobian `H(x,t)` as an owned l×n matrix; errors when the
    /// model carries none.
    pub fn obs_jacobian_mat(&self, x: &DVector<f64>, t: f64, state_dim: usize) -> Result<DMatrix<f64>> {
        let jac = self.obs_jacobian.as_ref().ok_or_else(|| {
            Error::Model(
                "observation Jacobian unavailable: use a registered family or attach one with \
                 with_obs_jacobian"
                    .into(),
            )
        })?;
        let mut buf = vec![0.0; self.obs_dim * state_dim];
        jac(x.as_slice(), t, &mut buf);
        Ok(DMatrix::from_row_slice(self.obs_dim, state_dim, &buf))
    }
}

impl fmt::Debug for GaussianObsModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GaussianObsModel")
            .field("obs_dim", &self.obs_dim)
            .field("obs_family", &self.obs_family)
            .finish()
    }
}

/// Point-process observation model: `l` counting channels with conditional
/// rates `h_i(X) ≥ 0` and a constant reference rate `λ₀ > 0` (the reference
/// rate only ever enters unnormalized quantities; normalized filters are
/// invariant to it).
#[derive(Clone)]
pub struct PointProcessObsModel {
    obs_dim: usize,
    rate_fn: Arc<RateFn>,
    reference_rate: f64,
    channel_families: Option<Vec<RateFamily>>,
    rate_table: Option<DMatrix<f64>>,
}

impl PointProcessObsModel {
    /// Builds the model from an opaque rate callback.
    pub fn new(obs_dim: usize, rate_fn: Arc<RateFn>, reference_rate: f64) -> Result<Self> {
        if obs_dim == 0 {
            return Err(Error::Model("observation dimension must be positive".into()));
        }
        if !(reference_rate > 0.0) {
            return Err(Error::Model(format!(
                "reference rate must be positive, got {reference_rate}"
            )));
        }
        Ok(Self {
            obs_dim,
            rate_fn,
            reference_rate,
            channel_families: None,
            rate_table: None,
        })
    }

    /// Observation model for a finite-state signal: entry `(j, i)` of
    /// `table` (l×n) is the rate of channel `j` while the chain occupies
    /// state `i`. Rates must be nonnegative; the table stays accessible to
    /// the finite-state filters via [`rate_table`](Self::rate_table).
    pub fn from_rate_table(table: DMatrix<f64>, reference_rate: f64) -> Result<Self> {
        let (l, n) = (table.nrows(), table.ncols());
        if l == 0 || n == 0 {
            return Err(Error::Shape("rate table must be nonempty".into()));
        }
        if let Some(bad) = table.iter().find(|&&r| r < 0.0) {
            return Err(Error::Model(format!("rate table has negative entry {bad}")));
        }
        let lookup = table.clone();
        let rate_fn: Arc<RateFn> = Arc::new(move |x, out| {
            let i = (x[0].round() as usize).min(lookup.ncols() - 1);
            for (r, o) in out.iter_mut().enumerate() {
                *o = lookup[(r, i)];
            }
        });
        let mut model = Self::new(l, rate_fn, reference_rate)?;
        model.rate_table = Some(table);
        Ok(model)
    }

    /// Builds the model from registered rate families (scalar state), one
    /// per channel; derivatives and moment closures come with the families.
    pub fn from_families(channels: Vec<RateFamily>, reference_rate: f64) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Model("at least one rate channel is required".into()));
        }
        let fams = channels.clone();
        let rate_fn: Arc<RateFn> = Arc::new(move |x, out| {
            for (o, fam) in out.iter_mut().zip(&fams) {
                *o = fam.eval(x[0]);
            }
        });
        let mut model = Self::new(channels.len(), rate_fn, reference_rate)?;
        model.channel_families = Some(channels);
        Ok(model)
    }

    /// Observation dimension `l` (number of channels).
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// The reference rate `λ₀`.
    pub fn reference_rate(&self) -> f64 {
        self.reference_rate
    }

    /// Per-channel registered families, when the model was built from them.
    pub fn channel_families(&self) -> Option<&[RateFamily]> {
        self.channel_families.as_deref()
    }

    /// Per-state rate table (l×n) when the model was built with
    /// [`from_rate_table`](Self::from_rate_table).
    pub fn rate_table(&self) -> Option<&DMatrix<f64>> {
        self.rate_table.as_ref()
    }

    /// Evaluates the channel rates `h(x)` into `out` (length `l`),
    /// allocation-free.
    pub fn rate_into(&self, x: &[f64], out: &mut [f64]) {
        (self.rate_fn)(x, out);
    }

    /// `h(x)` as an owned vector.
    pub fn rate_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.obs_dim);
        self.rate_into(x.as_slice(), out.as_mut_slice());
        out
    }
}

impl fmt::Debug for PointProcessObsModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PointProcessObsModel")
            .field("obs_dim", &self.obs_dim)
            .field("reference_rate", &self.reference_rate)
            .field("channel_families", &self.channel_families)
            .finish()
    }
}

// ---------------------------------------------------------------------------
// Observables and the jump-diffusion generator
// ---------------------------------------------------------------------------

/// Real-valued test function φ(x) with optional analytic first and second
/// derivatives. Missing derivatives fall back to central finite differences
/// with per-coordinate step `max(1e-5, 1e-5·|x_i|)`.
#[derive(Clone)]
pub struct ObservableFn {
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    grad: Option<Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>>,
    hessian: Option<Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>>,
}

impl ObservableFn {
    /// Wraps a bare function; derivatives will use finite differences.
    pub fn new(f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>) -> Self {
        Self {
            f,
            grad: None,
            hessian: None,
        }
    }

    /// Attaches an analytic gradient callback (length-n output).
    pub fn with_grad(mut self, grad: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>) -> Self {
        self.grad = Some(grad);
        self
    }

    /// Attaches an analytic Hessian callback (n·n row-major output).
    pub fn with_hessian(mut self, hessian: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>) -> Self {
        self.hessian = Some(hessian);
        self
    }

    /// Scalar observable from plain closures.
    pub fn scalar(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(Arc::new(move |x: &[f64]| f(x[0])))
            .with_grad(Arc::new(move |x: &[f64]| vec![df(x[0])]))
            .with_hessian(Arc::new(move |x: &[f64]| vec![d2f(x[0])]))
    }

    /// φ(x).
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    fn fd_step(xi: f64) -> f64 {
        (1e-5 * xi.abs()).max(1e-5)
    }

    /// ∇φ(x): analytic when attached, otherwise central differences.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        if let Some(grad) = &self.grad {
            return grad(x);
        }
        let mut xp = x.to_vec();
        let mut out = vec![0.0; x.len()];
        for i in 0..x.len() {
            let h = Self::fd_step(x[i]);
            xp[i] = x[i] + h;
            let fp = (self.f)(&xp);
            xp[i] = x[i] - h;
            let fm = (self.f)(&xp);
            xp[i] = x[i];
            out[i] = (fp - fm) / (2.0 * h);
        }
        out
    }

    /// ∇²φ(x) (row-major n·n): analytic when attached, otherwise central
    /// differences.
    pub fn hessian(&self, x: &[f64]) -> Vec<f64> {
        if let Some(hessian) = &self.hessian {
            return hessian(x);
        }
        let n = x.len();
        let f0 = (self.f)(x);
        let mut xp = x.to_vec();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let hi = Self::fd_step(x[i]);
            // Diagonal: standard second central difference.
            xp[i] = x[i] + hi;
            let fp = (self.f)(&xp);
            xp[i] = x[i] - hi;
            let fm = (self.f)(&xp);
            xp[i] = x[i];
            out[i * n + i] = (fp - 2.0 * f0 + fm) / (hi * hi);
            // Off-diagonals: four-point cross difference.
            for j in (i + 1)..n {
                let hj = Self::fd_step(x[j]);
                let mut probe = |si: f64, sj: f64| {
                    xp[i] = x[i] + si * hi;
                    xp[j] = x[j] + sj * hj;
                    let v = (self.f)(&xp);
                    xp[i] = x[i];
                    xp[j] = x[j];
                    v
                };
                let fpp = probe(1.0, 1.0);
                let fpm = probe(1.0, -1.0);
                let fmp = probe(-1.0, 1.0);
                let fmm = probe(-1.0, -1.0);
                let v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        out
    }

    /// Checks attached derivative callbacks against central differences at
    /// the given probe points (relative tolerance `1e-5`, absolute floor
    /// `1e-7` near zeros).
    pub fn validate_derivatives(&self, points: &[Vec<f64>]) -> Result<()> {
        for x in points {
            if let Some(grad) = &self.grad {
                let analytic = grad(x);
                let fd = Self::new(self.f.clone()).gradient(x);
                for (i, (a, d)) in analytic.iter().zip(&fd).enumerate() {
                    let scale = a.abs().max(d.abs()).max(1e-2);
                    if (a - d).abs() > 1e-5 * scale + 1e-7 {
                        return Err(Error::Model(format!(
                            "gradient component {i} at {x:?}: analytic {a} vs finite-difference {d}"
                        )));
                    }
                }
            }
            if let Some(hessian) = &self.hessian {
                let analytic = hessian(x);
                let fd = Self::new(self.f.clone()).hessian(x);
                for (i, (a, d)) in analytic.iter().zip(&fd).enumerate() {
                    let scale = a.abs().max(d.abs()).max(1.0);
                    // Second differences carry more cancellation noise.
                    if (a - d).abs() > 1e-4 * scale {
                        return Err(Error::Model(format!(
                            "hessian entry {i} at {x:?}: analytic {a} vs finite-difference {d}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for ObservableFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObservableFn")
            .field("analytic_grad", &self.grad.is_some())
            .field("analytic_hessian", &self.hessian.is_some())
            .finish()
    }
}

/// Applies the jump-diffusion generator to a test function at a point:
///
/// ```text
/// 𝒜φ(x) = Σ_i f_i ∂_i φ + ½ Σ_ij (GGᵀ)_ij ∂_i∂_j φ
///         + Σ_k λ_k(x) [φ(x + J_k) − φ(x)]
/// ```
///
/// Derivatives of φ come from the observable (analytic or finite-difference).
/// NaN from any callback is reported as a numerical error.
pub fn apply_generator_jd(
    model: &JumpDiffusionModel,
    phi: &ObservableFn,
    x: &DVector<f64>,
    t: f64,
) -> Result<f64> {
    let n = model.dim();
    if x.len() != n {
        return Err(Error::Shape(format!(
            "point has dimension {}, model has {}",
            x.len(),
            n
        )));
    }
    let xs = x.as_slice();

    let f = model.drift_vec(x, t);
    let gg = model.noise_cov(x, t);
    let grad = phi.gradient(xs);
    let hess = phi.hessian(xs);

    let mut total = 0.0;
    for i in 0..n {
        total += f[i] * grad[i];
        for j in 0..n {
            total += 0.5 * gg[(i, j)] * hess[i * n + j];
        }
    }

    let k = model.n_jump_channels();
    if k > 0 {
        let rates = model.jump_rate_vec(x);
        let amps = model.jump_amplitude_mat(x, t);
        let phi_x = phi.eval(xs);
        let mut shifted = x.clone();
        for c in 0..k {
            if rates[c] < 0.0 {
                return Err(Error::Numerical(format!(
                    "jump rate channel {c} returned negative rate {} at x = {x:?}",
                    rates[c]
                )));
            }
            for i in 0..n {
                shifted[i] = x[i] + amps[(i, c)];
            }
            total += rates[c] * (phi.eval(shifted.as_slice()) - phi_x);
        }
    }

    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "generator evaluation produced {total} at x = {x:?} (NaN/inf from a callback?)"
        )));
    }
    Ok(total)
}

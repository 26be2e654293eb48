//! Particle filters in continuous time: weighted bootstrap filtering and
//! the unweighted constant-gain feedback ensemble.
//!
//! The bootstrap path splits each filter step in two:
//!
//! - [`bpf_propagate`] moves every particle one Euler–Maruyama step under
//!   the prior dynamics (the bootstrap proposal);
//! - [`bpf_reweight_gaussian`] / [`bpf_reweight_pp`] multiply the
//!   importance weights by the observation likelihood ratio, in log space:
//!
//!   ```text
//!   log wᵢ += h(Xᵢ)ᵀΣy⁻¹ dY − ½ h(Xᵢ)ᵀΣy⁻¹h(Xᵢ) dt     (Gaussian noise)
//!   log wᵢ += Σⱼ [log hⱼ(Xᵢ) dNⱼ − hⱼ(Xᵢ) dt]           (point process)
//!   ```
//!
//!   followed by log-space renormalization. The quadratic dY term of the
//!   Gaussian density and the reference rate λ₀ of the point process are
//!   identical across particles, so normalization absorbs them — they
//!   never appear in the code, which is what makes the normalized weights
//!   bit-identical across reference-rate choices.
//!
//! [`weight_sde_step`] is the linearized alternative — the weight SDE
//!
//! ```text
//! dwᵢ = wᵢ (h(Xᵢ) − h̄)ᵀ Σy⁻¹ (dY − h̄ dt),    h̄ = Σⱼ wⱼ h(Xⱼ)
//! ```
//!
//! (point-process form with `diag(h̄)⁻¹` and `dN − h̄ dt`), kept for
//! cross-validation: one Euler step agrees with the exponential reweight
//! to O(dt²).
//!
//! [`fbpf_step`] is the feedback particle filter in its constant-gain
//! approximation: observations steer every (equally weighted) particle,
//!
//! ```text
//! dXᵢ = f(Xᵢ) dt + G dBᵢ + K Σy⁻¹ [dY − ½(h(Xᵢ) + h̄) dt],
//! K = (1/M) Σᵢ Xᵢ (h(Xᵢ) − h̄)ᵀ,
//! ```
//!
//! and no weights ever change. On linear models `K` equals the ensemble
//! covariance times `Bᵀ`, which makes the step an ensemble Kalman–Bucy
//! filter.
//!
//! Ensemble reductions (h̄, K, normalization) run in particle-index order
//! and center on particle 0's value, so "h constant across particles"
//! collapses exactly — not to roundoff — and repeated runs with the same
//! seed are bit-identical.

use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{GaussianObsModel, InitialLaw, JumpDiffusionModel, PointProcessObsModel};
use crate::numeric::logsumexp;

static NEGATIVE_WEIGHT_WARNING: AtomicBool = AtomicBool::new(false);

// ---------------------------------------------------------------------------
// Ensemble
// ---------------------------------------------------------------------------

/// A weighted particle ensemble: `m` particles of dimension `dim`, stored
/// particle-major (`positions[i*dim..(i+1)*dim]` is particle `i`), with
/// log-weights normalized so that `Σ exp(log_wᵢ) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    positions: Vec<f64>,
    log_weights: Vec<f64>,
    dim: usize,
}

impl ParticleEnsemble {
    /// Wraps explicit positions with uniform weights.
    pub fn from_positions(positions: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || positions.is_empty() || positions.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} coordinates do not form particles of dimension {dim}",
                positions.len()
            )));
        }
        let m = positions.len() / dim;
        Ok(Self {
            positions,
            log_weights: vec![-(m as f64).ln(); m],
            dim,
        })
    }

    /// Samples `m` particles from an initial law, with uniform weights.
    pub fn from_initial_law<R: Rng>(law: &InitialLaw, m: usize, rng: &mut R) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("ensemble size must be positive".into()));
        }
        let dim = law.dim();
        let mut positions = Vec::with_capacity(m * dim);
        for _ in 0..m {
            positions.extend_from_slice(law.sample(rng).as_slice());
        }
        Self::from_positions(positions, dim)
    }

    /// Number of particles `M`.
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    /// True for an ensemble with no particles (not constructible).
    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    /// State dimension `n`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Particle `i`'s coordinates.
    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    /// All coordinates, particle-major.
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Normalized log-weights.
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Normalized linear weights.
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|&lw| lw.exp()).collect()
    }

    /// Resets every weight to `1/M`.
    pub fn reset_weights(&mut self) {
        let lw = -(self.len() as f64).ln();
        self.log_weights.fill(lw);
    }

    /// True when every log-weight is bit-identical (the feedback filter's
    /// standing invariant).
    pub fn weights_uniform(&self) -> bool {
        self.log_weights
            .iter()
            .all(|lw| lw.to_bits() == self.log_weights[0].to_bits())
    }

    /// Effective sample size `1 / Σ wᵢ²`, between 1 (degenerate) and M
    /// (uniform).
    pub fn ess(&self) -> f64 {
        1.0 / self
            .log_weights
            .iter()
            .map(|&lw| (2.0 * lw).exp())
            .sum::<f64>()
    }

    /// Importance-weighted posterior mean.
    pub fn weighted_mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.dim);
        for i in 0..self.len() {
            let w = self.log_weights[i].exp();
            for (k, &x) in self.position(i).iter().enumerate() {
                mean[k] += w * x;
            }
        }
        mean
    }

    /// Importance-weighted covariance `Σ wᵢ (Xᵢ−μ)(Xᵢ−μ)ᵀ` (the `1/M`
    /// biased form under uniform weights, which is the convention the
    /// constant-gain equivalence holds in).
    pub fn weighted_cov(&self) -> DMatrix<f64> {
        let mean = self.weighted_mean();
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.len() {
            let w = self.log_weights[i].exp();
            let x = self.position(i);
            for r in 0..self.dim {
                for c in 0..self.dim {
                    cov[(r, c)] += w * (x[r] - mean[r]) * (x[c] - mean[c]);
                }
            }
        }
        cov
    }

    /// Weighted histogram as a cell-averaged density on `[xmin, xmax]`
    /// (scalar ensembles): out-of-range particles are clamped into the
    /// boundary cells so the total mass is preserved, and values integrate
    /// to 1 over the grid.
    pub fn weighted_histogram(&self, xmin: f64, xmax: f64, n_cells: usize) -> Result<Vec<f64>> {
        if self.dim != 1 {
            return Err(Error::Shape(
                "histogram is defined for scalar ensembles".into(),
            ));
        }
        if n_cells == 0 || !(xmax > xmin) {
            return Err(Error::Config("histogram grid is empty or inverted".into()));
        }
        let dx = (xmax - xmin) / n_cells as f64;
        let mut density = vec![0.0; n_cells];
        for i in 0..self.len() {
            let cell = (((self.positions[i] - xmin) / dx).floor() as isize)
                .clamp(0, n_cells as isize - 1) as usize;
            density[cell] += self.log_weights[i].exp() / dx;
        }
        Ok(density)
    }

    /// Writes the ensemble snapshot as CSV: `index,x0..,weight`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "index")?;
        for k in 0..self.dim {
            write!(out, ",x{k}")?;
        }
        writeln!(out, ",weight")?;
        for i in 0..self.len() {
            write!(out, "{i}")?;
            for &x in self.position(i) {
                write!(out, ",{x}")?;
            }
            writeln!(out, ",{}", self.log_weights[i].exp())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Log-normalizes the weights in place; errors when the total mass is
    /// zero (`DegenerateEnsemble`) or non-finite.
    fn normalize(&mut self) -> Result<()> {
        if self.log_weights.iter().any(|lw| lw.is_nan()) {
            return Err(Error::Numerical(
                "particle weight became NaN during reweighting".into(),
            ));
        }
        let norm = logsumexp(&self.log_weights);
        if !norm.is_finite() {
            return Err(Error::DegenerateEnsemble(
                "every particle weight underflowed to zero".into(),
            ));
        }
        for lw in &mut self.log_weights {
            *lw -= norm;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Offspring selection scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleScheme {
    /// One stratified uniform per generation; minimal variance, the
    /// default.
    Systematic,
    /// M independent draws from the weight distribution.
    Multinomial,
}

/// When and how to resample: offspring scheme plus the ESS fraction below
/// which a caller should trigger.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResampleSpec {
    pub scheme: ResampleScheme,
    /// Trigger threshold as a fraction of M, in (0, 1].
    pub ess_threshold: f64,
}

impl Default for ResampleSpec {
    fn default() -> Self {
        Self {
            scheme: ResampleScheme::Systematic,
            ess_threshold: 0.5,
        }
    }
}

impl ResampleSpec {
    /// Validates the threshold fraction.
    pub fn new(scheme: ResampleScheme, ess_threshold: f64) -> Result<Self> {
        if !(ess_threshold > 0.0 && ess_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "ESS threshold must lie in (0, 1], got {ess_threshold}"
            )));
        }
        Ok(Self {
            scheme,
            ess_threshold,
        })
    }

    /// Caller-side trigger policy: resample when ESS drops below τ·M.
    pub fn should_trigger(&self, ess: f64, m: usize) -> bool {
        ess < self.ess_threshold * m as f64
    }
}

/// Draws M offspring from the weight distribution and resets the weights
/// to 1/M. Systematic resampling uses a single stratified uniform;
/// multinomial uses M independent draws.
pub fn resample<R: Rng>(
    ens: &mut ParticleEnsemble,
    spec: &ResampleSpec,
    rng: &mut R,
) -> Result<()> {
    let m = ens.len();
    let weights = ens.weights();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateEnsemble(
            "cannot resample an ensemble whose weights are all zero".into(),
        ));
    }
    let mut cumulative = Vec::with_capacity(m);
    let mut acc = 0.0;
    for &w in &weights {
        acc += w;
        cumulative.push(acc);
    }
    let last = *cumulative.last().unwrap();

    let pick = |target: f64, from: usize| -> usize {
        let t = target.min(last);
        let mut i = from;
        while i + 1 < m && cumulative[i] < t {
            i += 1;
        }
        i
    };

    let dim = ens.dim;
    let mut offspring = Vec::with_capacity(m * dim);
    match spec.scheme {
        ResampleScheme::Systematic => {
            let u0: f64 = rng.gen::<f64>() / m as f64 * total;
            let mut parent = 0;
            for k in 0..m {
                parent = pick(u0 + k as f64 / m as f64 * total, parent);
                offspring.extend_from_slice(ens.position(parent));
            }
        }
        ResampleScheme::Multinomial => {
            for _ in 0..m {
                let parent = pick(rng.gen::<f64>() * total, 0);
                offspring.extend_from_slice(ens.position(parent));
            }
        }
    }
    ens.positions = offspring;
    ens.reset_weights();
    Ok(())
}

// ---------------------------------------------------------------------------
// Bootstrap particle filter
// ---------------------------------------------------------------------------

/// Advances every particle one Euler–Maruyama step under the prior
/// dynamics; weights are untouched. Per particle the generator consumes
/// exactly `dim` normals plus one uniform per jump channel, so draw
/// alignment is independent of the state values.
pub fn bpf_propagate<R: Rng>(
    ens: &mut ParticleEnsemble,
    model: &JumpDiffusionModel,
    t: f64,
    dt: f64,
    rng: &mut R,
) -> Result<()> {
    let n = model.dim();
    if n != ens.dim {
        return Err(Error::Shape(format!(
            "model dimension {n} does not match ensemble dimension {}",
            ens.dim
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    let k = model.n_jump_channels();
    let sqrt_dt = dt.sqrt();
    let mut drift = vec![0.0; n];
    let mut diffusion = vec![0.0; n * n];
    let mut jump_amp = vec![0.0; n * k];
    let mut rates = vec![0.0; k];
    let mut noise = vec![0.0; n];
    let mut next = vec![0.0; n];

    for i in 0..ens.len() {
        let x = &mut ens.positions[i * n..(i + 1) * n];
        model.drift_into(x, t, &mut drift);
        model.diffusion_into(x, t, &mut diffusion);
        for xi in noise.iter_mut() {
            *xi = StandardNormal.sample(rng);
        }
        for r in 0..n {
            let mut dx = drift[r] * dt;
            for c in 0..n {
                dx += diffusion[r * n + c] * sqrt_dt * noise[c];
            }
            next[r] = x[r] + dx;
        }
        if k > 0 {
            model.jump_rate_into(x, &mut rates);
            model.jump_amplitude_into(x, t, &mut jump_amp);
            for (j, &rate) in rates.iter().enumerate() {
                if rate < 0.0 {
                    return Err(Error::Model(format!(
                        "negative jump rate {rate} on channel {j} during propagation"
                    )));
                }
                let fires = rng.gen::<f64>() < (rate * dt).min(1.0);
                if fires {
                    for r in 0..n {
                        next[r] += jump_amp[r * k + j];
                    }
                }
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "particle {i} left the finite domain at t = {t} (drift or diffusion callback \
                 produced a non-finite value)"
            )));
        }
        x.copy_from_slice(&next);
    }
    Ok(())
}

/// Multiplies the importance weights by the Gaussian-observation
/// likelihood ratio and renormalizes. The dY² term of the observation
/// density is particle-independent and cancels in normalization.
pub fn bpf_reweight_gaussian(
    ens: &mut ParticleEnsemble,
    obs: &GaussianObsModel,
    dy: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<()> {
    let l = obs.obs_dim();
    if dy.len() != l {
        return Err(Error::Shape(format!(
            "observation increment has length {}, expected {l}",
            dy.len()
        )));
    }
    let noise_inv = obs.noise_inv();
    let weighted_dy = noise_inv * dy; // Σy⁻¹ dY, shared by all particles
    let mut h = vec![0.0; l];
    for i in 0..ens.len() {
        obs.obs_into(ens.position(i), t, &mut h);
        let mut linear = 0.0;
        let mut quadratic = 0.0;
        for r in 0..l {
            linear += h[r] * weighted_dy[r];
            let mut hsh = 0.0;
            for c in 0..l {
                hsh += noise_inv[(r, c)] * h[c];
            }
            quadratic += h[r] * hsh;
        }
        ens.log_weights[i] += linear - 0.5 * quadratic * dt;
    }
    ens.normalize()
}

/// Multiplies the importance weights by the point-process likelihood
/// ratio and renormalizes. A particle whose rate vanishes on a firing
/// channel drops to log-weight −∞ (it is ruled out); only the whole
/// ensemble dying is an error. The reference rate λ₀ cancels in
/// normalization and never enters.
pub fn bpf_reweight_pp(
    ens: &mut ParticleEnsemble,
    obs: &PointProcessObsModel,
    dn: &[u8],
    dt: f64,
) -> Result<()> {
    let l = obs.obs_dim();
    if dn.len() != l {
        return Err(Error::Shape(format!(
            "got {} event indicators for {l} channels",
            dn.len()
        )));
    }
    let mut h = vec![0.0; l];
    for i in 0..ens.len() {
        obs.rate_into(ens.position(i), &mut h);
        let lw = &mut ens.log_weights[i];
        for j in 0..l {
            if h[j] < 0.0 {
                return Err(Error::Model(format!(
                    "rate callback returned negative rate {} on channel {j}",
                    h[j]
                )));
            }
            *lw -= h[j] * dt;
            if dn[j] == 1 {
                // ln(0) = −∞ rules the particle out; NaN (0·∞) cannot arise
                // because the term is only added on events.
                *lw += h[j].ln();
            }
        }
    }
    ens.normalize().map_err(|e| match e {
        Error::DegenerateEnsemble(_) => Error::DegenerateEnsemble(
            "an event occurred on a channel whose rate is zero at every particle".into(),
        ),
        other => other,
    })
}

/// Weighted ensemble mean of a per-particle vector quantity, centered on
/// particle 0's value so that a constant field collapses to it exactly
/// (no roundoff residue — several invariants rely on exact cancellation).
fn centered_weighted_mean(values: &[f64], l: usize, weights: &[f64]) -> Vec<f64> {
    let mut mean: Vec<f64> = values[..l].to_vec();
    let mut correction = vec![0.0; l];
    for (i, &w) in weights.iter().enumerate() {
        for r in 0..l {
            correction[r] += w * (values[i * l + r] - values[r]);
        }
    }
    for r in 0..l {
        mean[r] += correction[r];
    }
    mean
}

/// One Euler step of the weight SDE (the linearized alternative to the
/// exponential reweight, kept for cross-validation): for Gaussian
/// observations pass `dy` and `dn: None`; for point-process observations
/// pass the event indicators and `dy` is ignored. A weight pushed below
/// zero by the linearization is clamped to zero (with a one-time warning)
/// and the ensemble renormalized.
pub fn weight_sde_step(
    ens: &mut ParticleEnsemble,
    gaussian: Option<(&GaussianObsModel, &DVector<f64>)>,
    point_process: Option<(&PointProcessObsModel, &[u8])>,
    t: f64,
    dt: f64,
) -> Result<()> {
    let m = ens.len();
    let weights = ens.weights();
    match (gaussian, point_process) {
        (Some((obs, dy)), None) => {
            let l = obs.obs_dim();
            if dy.len() != l {
                return Err(Error::Shape("observation increment length mismatch".into()));
            }
            let mut h_all = vec![0.0; m * l];
            for i in 0..m {
                obs.obs_into(ens.position(i), t, &mut h_all[i * l..(i + 1) * l]);
            }
            let h_bar = centered_weighted_mean(&h_all, l, &weights);
            // v = Σy⁻¹(dY − h̄ dt)
            let innovation = dy - DVector::from_row_slice(&h_bar) * dt;
            let v = obs.noise_inv() * innovation;
            for i in 0..m {
                let mut dot = 0.0;
                for r in 0..l {
                    dot += (h_all[i * l + r] - h_bar[r]) * v[r];
                }
                set_linear_weight(ens, i, weights[i] * (1.0 + dot));
            }
        }
        (None, Some((obs, dn))) => {
            let l = obs.obs_dim();
            if dn.len() != l {
                return Err(Error::Shape("event indicator length mismatch".into()));
            }
            let mut h_all = vec![0.0; m * l];
            for i in 0..m {
                obs.rate_into(ens.position(i), &mut h_all[i * l..(i + 1) * l]);
            }
            let h_bar = centered_weighted_mean(&h_all, l, &weights);
            for i in 0..m {
                let mut dot = 0.0;
                for r in 0..l {
                    if h_bar[r] <= 0.0 {
                        return Err(Error::Numerical(format!(
                            "mean rate on channel {r} is not positive; the weight SDE is \
                             undefined"
                        )));
                    }
                    dot += (h_all[i * l + r] - h_bar[r]) / h_bar[r]
                        * (f64::from(dn[r]) - h_bar[r] * dt);
                }
                set_linear_weight(ens, i, weights[i] * (1.0 + dot));
            }
        }
        _ => {
            return Err(Error::Config(
                "weight SDE needs exactly one observation model (Gaussian or point-process)"
                    .into(),
            ))
        }
    }
    ens.normalize()
}

fn set_linear_weight(ens: &mut ParticleEnsemble, i: usize, w: f64) {
    let w = if w < 0.0 {
        if !NEGATIVE_WEIGHT_WARNING.swap(true, Ordering::Relaxed) {
            eprintln!(
                "warning: weight SDE drove a particle weight negative (clamped to zero); \
                 the Euler step is too coarse for this innovation size"
            );
        }
        0.0
    } else {
        w
    };
    ens.log_weights[i] = w.ln();
}

// ---------------------------------------------------------------------------
// Feedback particle filter (constant gain)
// ---------------------------------------------------------------------------

/// The constant-gain feedback matrix and ensemble mean observation:
/// `K = (1/M) Σᵢ Xᵢ (h(Xᵢ) − h̄)ᵀ` (n×l) and `h̄ = (1/M) Σᵢ h(Xᵢ)`.
/// On a linear observation model `h = Bx` this `K` equals `Σ̂ Bᵀ` with
/// `Σ̂` the biased (1/M) ensemble covariance.
pub fn fbpf_gain(
    ens: &ParticleEnsemble,
    obs: &GaussianObsModel,
    t: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (m, n, l) = (ens.len(), ens.dim(), obs.obs_dim());
    let mut h_all = vec![0.0; m * l];
    for i in 0..m {
        obs.obs_into(ens.position(i), t, &mut h_all[i * l..(i + 1) * l]);
    }
    let uniform = vec![1.0 / m as f64; m];
    let h_bar = centered_weighted_mean(&h_all, l, &uniform);
    let mut gain = DMatrix::zeros(n, l);
    for i in 0..m {
        let x = ens.position(i);
        for r in 0..n {
            for c in 0..l {
                gain[(r, c)] += x[r] * (h_all[i * l + c] - h_bar[c]);
            }
        }
    }
    gain /= m as f64;
    Ok((gain, DVector::from_row_slice(&h_bar)))
}

/// One step of the feedback particle filter with the constant-gain
/// approximation. The ensemble must carry exactly uniform weights (they
/// stay uniform; the observation enters through the particle dynamics,
/// not through weights):
///
/// ```text
/// Xᵢ += f(Xᵢ) dt + G √dt ξᵢ + K Σy⁻¹ [dY − ½(h(Xᵢ) + h̄) dt]
/// ```
///
/// The gain and h̄ are computed from the ensemble before any particle
/// moves.
pub fn fbpf_step<R: Rng>(
    ens: &mut ParticleEnsemble,
    model: &JumpDiffusionModel,
    obs: &GaussianObsModel,
    dy: &DVector<f64>,
    t: f64,
    dt: f64,
    rng: &mut R,
) -> Result<()> {
    if model.n_jump_channels() != 0 {
        return Err(Error::Model(
            "feedback particle filter supports diffusion signals only".into(),
        ));
    }
    let n = model.dim();
    if n != ens.dim {
        return Err(Error::Shape(format!(
            "model dimension {n} does not match ensemble dimension {}",
            ens.dim
        )));
    }
    if dy.len() != obs.obs_dim() {
        return Err(Error::Shape("observation increment length mismatch".into()));
    }
    if !ens.weights_uniform() {
        return Err(Error::Model(
            "feedback particle filter requires uniform weights".into(),
        ));
    }
    let l = obs.obs_dim();
    let (gain, h_bar) = fbpf_gain(ens, obs, t)?;
    let feedback = gain * obs.noise_inv(); // K Σy⁻¹, n×l

    let sqrt_dt = dt.sqrt();
    let mut drift = vec![0.0; n];
    let mut diffusion = vec![0.0; n * n];
    let mut h = vec![0.0; l];
    let mut noise = vec![0.0; n];
    let mut next = vec![0.0; n];
    for i in 0..ens.len() {
        let x = &mut ens.positions[i * n..(i + 1) * n];
        model.drift_into(x, t, &mut drift);
        model.diffusion_into(x, t, &mut diffusion);
        obs.obs_into(x, t, &mut h);
        for xi in noise.iter_mut() {
            *xi = StandardNormal.sample(rng);
        }
        for r in 0..n {
            let mut dx = drift[r] * dt;
            for c in 0..n {
                dx += diffusion[r * n + c] * sqrt_dt * noise[c];
            }
            for c in 0..l {
                dx += feedback[(r, c)] * (dy[c] - 0.5 * (h[c] + h_bar[c]) * dt);
            }
            next[r] = x[r] + dx;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "particle {i} left the finite domain at t = {t} in the feedback filter"
            )));
        }
        x.copy_from_slice(&next);
    }
    Ok(())
}

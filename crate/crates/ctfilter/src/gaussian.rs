//! Gaussian approximate filters for nonlinear diffusion models.
//!
//! Three approximations, all propagating a [`GaussianBelief`]:
//!
//! - [`ekbf_step`] — local linearization around the current mean, for
//!   Gaussian-noise observations:
//!
//!   ```text
//!   μ += f(μ) dt + ΣHᵀΣy⁻¹ (dY − h(μ) dt)
//!   Σ += (FΣ + ΣFᵀ + Σx − ΣHᵀΣy⁻¹HΣ) dt
//!   ```
//!
//!   with `F = ∂f/∂x`, `H = ∂h/∂x` evaluated at μ. On linear models the
//!   linearization is exact and the step reproduces
//!   [`kalman_bucy_step`](crate::exact::kalman_bucy_step) pathwise.
//!
//! - [`pp_ekbf_step`] — the point-process analogue, driven by counting
//!   increments:
//!
//!   ```text
//!   μ += f(μ) dt + Σ Σᵢ ∇log hᵢ(μ) (dNᵢ − hᵢ(μ) dt)
//!   Σ += (FΣ + ΣFᵀ + Σx) dt − Σ [Σᵢ (∂²hᵢ(μ) dt + Sᵢ dNᵢ)] Σ
//!   ```
//!
//!   where `Sᵢ = (Σ − (∂²log hᵢ(μ))⁻¹)⁻¹` when the log-rate curvature is
//!   nonzero and `Sᵢ = 0` otherwise. Exponential rates `h ∝ exp(βx)` sit
//!   exactly on the zero branch: events move the mean but never the
//!   covariance.
//!
//! - [`adf_pp_step`] — Gaussian assumed-density filtering for point-process
//!   observations: exact moment equations for (μ, Σ) with every posterior
//!   expectation closed under the current Gaussian. Expectations come from
//!   a [`GaussianClosureSpec`]: closed forms for registered rate/drift
//!   families, or Gauss–Hermite quadrature (tensorized up to dimension 2)
//!   for anything else.
//!
//! The ADF covariance update subtracts a rank-one term per event and can
//! overshoot at finite dt; the step clamps tiny negative eigenvalues and
//! reports whether it had to, so a harness can count clamp events (a
//! healthy configuration clamps never).

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::exact::GaussianBelief;
use crate::model::{GaussianObsModel, JumpDiffusionModel, PointProcessObsModel, RateFamily};
use crate::numeric::clamp_psd;

/// Relative eigenvalue ratio below which a log-rate curvature matrix is
/// treated as effectively singular (zero branch of the event correction).
const CURVATURE_COND_FLOOR: f64 = 1e-12;

/// Default Gauss–Hermite order: comfortably exact for the registered
/// families' moments at the posterior widths seen in practice.
pub const DEFAULT_QUAD_ORDER: usize = 21;

static CURVATURE_WARNING: AtomicBool = AtomicBool::new(false);

/// Result of one Gaussian approximate-filter step: the updated belief plus
/// a flag recording whether the covariance needed an eigenvalue clamp to
/// stay positive semidefinite (roundoff-scale repair; anything larger is an
/// error). Harnesses accumulate the flags into a per-run clamp counter.
#[derive(Clone, Debug)]
pub struct GaussianStep {
    /// Updated posterior approximation.
    pub belief: GaussianBelief,
    /// True when the covariance update overshot and an eigenvalue in
    /// `[-1e-10, 0)` was clamped to zero.
    pub clamped: bool,
}

// ---------------------------------------------------------------------------
// Closure specification
// ---------------------------------------------------------------------------

/// How [`adf_pp_step`] evaluates Gaussian expectations of the drift and
/// the rate functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaussianClosureSpec {
    /// Closed-form moments for registered drift/rate families (scalar
    /// state). Errors when the model carries no family tags.
    AnalyticFamily,
    /// Gauss–Hermite quadrature of the given (odd, ≥ 5) order against the
    /// current belief; tensorized up to state dimension 2.
    GaussHermite { order: usize },
}

impl Default for GaussianClosureSpec {
    fn default() -> Self {
        Self::GaussHermite {
            order: DEFAULT_QUAD_ORDER,
        }
    }
}

impl GaussianClosureSpec {
    /// Validated quadrature closure; the order must be odd and at least 5
    /// (an odd rule places a node at the mean, where the rate mass sits).
    pub fn gauss_hermite(order: usize) -> Result<Self> {
        if order < 5 || order % 2 == 0 {
            return Err(Error::Config(format!(
                "quadrature order must be odd and ≥ 5, got {order}"
            )));
        }
        Ok(Self::GaussHermite { order })
    }
}

/// Nodes and weights of the `order`-point Gauss–Hermite rule, computed by
/// the Golub–Welsch eigendecomposition of the Jacobi matrix. Weights are
/// returned already normalized to sum to 1, so that
/// `E[g(X)] ≈ Σ_k w_k g(μ + √2 σ z_k)` for `X ~ N(μ, σ²)`.
pub fn gauss_hermite_rule(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if order == 0 {
        return Err(Error::Config("quadrature order must be positive".into()));
    }
    let mut jacobi = DMatrix::zeros(order, order);
    for k in 1..order {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let nodes = pairs.iter().map(|p| p.0).collect();
    let weights = pairs.iter().map(|p| p.1 / total).collect();
    Ok((nodes, weights))
}

/// A matrix square root `M` with `M Mᵀ = cov`: the Cholesky factor when
/// the covariance is positive definite, otherwise the symmetric eigenroot
/// with negative roundoff clamped.
fn cov_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = Cholesky::new(cov.clone()) {
        return chol.l();
    }
    let eig = SymmetricEigen::new(cov.clone());
    let mut m = eig.eigenvectors.clone();
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        for i in 0..m.nrows() {
            m[(i, j)] *= s;
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Extended Kalman–Bucy, Gaussian observations
// ---------------------------------------------------------------------------

fn ensure_diffusion_only(model: &JumpDiffusionModel) -> Result<()> {
    if model.n_jump_channels() != 0 {
        return Err(Error::Model(
            "Gaussian approximate filters support diffusion signals only (no jump channels)"
                .into(),
        ));
    }
    Ok(())
}

/// One Euler step of the extended Kalman–Bucy filter. Requires the model's
/// drift Jacobian and the observation Jacobian (registered families carry
/// them; otherwise attach callbacks).
pub fn ekbf_step(
    belief: &GaussianBelief,
    model: &JumpDiffusionModel,
    obs: &GaussianObsModel,
    dy: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<GaussianStep> {
    ensure_diffusion_only(model)?;
    if dy.len() != obs.obs_dim() {
        return Err(Error::Shape(format!(
            "observation increment has length {}, expected {}",
            dy.len(),
            obs.obs_dim()
        )));
    }
    let mu = belief.mean();
    let sigma = belief.cov();

    let f = model.drift_vec(mu, t);
    let f_jac = model.drift_jacobian_mat(mu, t)?;
    let h = obs.obs_vec(mu, t);
    let h_jac = obs.obs_jacobian_mat(mu, t, model.dim())?;
    let sigma_x = model.noise_cov(mu, t);

    let gain = sigma * h_jac.transpose() * obs.noise_inv();
    let mean = mu + f * dt + &gain * (dy - h * dt);
    let flow = &f_jac * sigma + sigma * f_jac.transpose() + sigma_x - &gain * h_jac * sigma;
    let (cov, clamped) = clamp_psd(&(sigma + flow * dt))?;
    Ok(GaussianStep {
        belief: GaussianBelief::new(mean, cov)?,
        clamped,
    })
}

// ---------------------------------------------------------------------------
// Extended Kalman–Bucy, point-process observations
// ---------------------------------------------------------------------------

/// Event-triggered covariance correction `Sᵢ = (Σ − C⁻¹)⁻¹` for log-rate
/// curvature `C = ∂²log hᵢ(μ)`, with the singular neighborhood mapped to
/// the zero branch: `C = 0` exactly (log-linear rate) contributes nothing,
/// and a curvature matrix with eigenvalue ratio below 1e-12 is treated the
/// same way, once with a logged warning.
fn event_covariance_correction(
    sigma: &DMatrix<f64>,
    curvature: &DMatrix<f64>,
) -> Result<Option<DMatrix<f64>>> {
    let eig = SymmetricEigen::new(curvature.clone());
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |m, l| m.max(l.abs()));
    if max_abs == 0.0 {
        return Ok(None);
    }
    let min_abs = eig
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, l| m.min(l.abs()));
    if min_abs < CURVATURE_COND_FLOOR * max_abs {
        if !CURVATURE_WARNING.swap(true, Ordering::Relaxed) {
            eprintln!(
                "warning: near-singular log-rate curvature (|λ|min/|λ|max < {CURVATURE_COND_FLOOR:e}); \
                 treating the event covariance correction as zero"
            );
        }
        return Ok(None);
    }
    // C⁻¹ via the spectral factorization already in hand.
    let mut inv = eig.eigenvectors.clone();
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        for i in 0..inv.nrows() {
            inv[(i, j)] /= lam;
        }
    }
    let c_inv = &inv * eig.eigenvectors.transpose();
    let s = (sigma - c_inv).try_inverse().ok_or_else(|| {
        Error::Numerical(
            "event covariance correction is singular: Σ equals the inverse log-rate curvature"
                .into(),
        )
    })?;
    Ok(Some(s))
}

/// One Euler step of the point-process analogue of the extended
/// Kalman–Bucy filter. Derivative information comes from the observation
/// model's registered rate families, so the state must be scalar; an event
/// on a channel whose rate vanishes at the current mean is a
/// zero-likelihood error.
pub fn pp_ekbf_step(
    belief: &GaussianBelief,
    model: &JumpDiffusionModel,
    obs: &PointProcessObsModel,
    dn: &[u8],
    t: f64,
    dt: f64,
) -> Result<GaussianStep> {
    ensure_diffusion_only(model)?;
    if model.dim() != 1 {
        return Err(Error::Model(
            "point-process linearization filter supports scalar states (rate families are \
             functions of a scalar state)"
                .into(),
        ));
    }
    let families = obs.channel_families().ok_or_else(|| {
        Error::Model(
            "point-process linearization needs registered rate families for derivatives"
                .into(),
        )
    })?;
    if dn.len() != families.len() {
        return Err(Error::Shape(format!(
            "got {} event indicators for {} channels",
            dn.len(),
            families.len()
        )));
    }

    let mu = belief.mean();
    let sigma = belief.cov();
    let f = model.drift_vec(mu, t);
    let f_jac = model.drift_jacobian_mat(mu, t)?;
    let sigma_x = model.noise_cov(mu, t);

    let m = mu[0];
    let mut mean_correction = 0.0;
    let mut bracket = 0.0; // Σᵢ (∂²hᵢ(μ) dt + Sᵢ dNᵢ), scalar state
    for (i, fam) in families.iter().enumerate() {
        let rate = fam.eval(m);
        let event = dn[i] == 1;
        if event && rate <= 0.0 {
            return Err(Error::ZeroLikelihood(format!(
                "channel {i} fired but its linearized rate at the mean is {rate}"
            )));
        }
        mean_correction += fam.log_derivative(m) * (f64::from(dn[i]) - rate * dt);
        bracket += fam.second_derivative(m) * dt;
        if event {
            let curvature = DMatrix::from_element(1, 1, fam.log_second_derivative(m));
            if let Some(s) = event_covariance_correction(sigma, &curvature)? {
                bracket += s[(0, 0)];
            }
        }
    }

    let mean = mu + f * dt + sigma * DVector::from_element(1, mean_correction);
    let flow = &f_jac * sigma + sigma * f_jac.transpose() + sigma_x;
    let cov = sigma + flow * dt - sigma * bracket * sigma;
    let (cov, clamped) = clamp_psd(&cov)?;
    Ok(GaussianStep {
        belief: GaussianBelief::new(mean, cov)?,
        clamped,
    })
}

// ---------------------------------------------------------------------------
// Assumed-density filtering, point-process observations
// ---------------------------------------------------------------------------

/// Gaussian expectations of one rate channel, in the normalized form the
/// moment equations consume:
///
/// - `mean`   = ⟨h⟩
/// - `gain`   = cov(h, X) / ⟨h⟩
/// - `spread` = [cov(h, XXᵀ) − cov(h, X)μᵀ − μ cov(h, Xᵀ)] / ⟨h⟩
///
/// The normalized form keeps the exponential family's event cancellation
/// exact in floating point: `gain = βΣ` and `spread = (βΣ)(βΣ)ᵀ`, so the
/// event terms `spread − gain gainᵀ` vanish identically rather than to
/// roundoff.
struct ChannelMoments {
    mean: f64,
    gain: DVector<f64>,
    spread: DMatrix<f64>,
}

/// Gaussian expectations of the drift: `⟨f⟩` and `cov(X, fᵀ)`.
struct DriftMoments {
    mean: DVector<f64>,
    x_cov: DMatrix<f64>,
}

fn analytic_channel_moments(fam: &RateFamily, mu: f64, sigma: f64) -> ChannelMoments {
    let (mean, gain, spread) = match *fam {
        RateFamily::Constant { c } => (c, 0.0, 0.0),
        // Gaussian third central moments vanish, so the spread term of a
        // linear rate is exactly zero.
        RateFamily::Linear { c, b } => (c + b * mu, b * sigma / (c + b * mu), 0.0),
        RateFamily::Exponential { c, beta } => {
            let g = beta * sigma;
            (
                c * (beta * mu + 0.5 * beta * beta * sigma).exp(),
                g,
                g * g,
            )
        }
        RateFamily::GaussianBump { g0, s0, m0 } => {
            // Product of Gaussians: posterior-times-bump is a Gaussian with
            // moments (μ*, Σ*); all channel moments follow from it.
            let s_total = sigma + s0 * s0;
            let mean =
                g0 * s0 / s_total.sqrt() * (-(mu - m0) * (mu - m0) / (2.0 * s_total)).exp();
            let sigma_star = 1.0 / (1.0 / sigma + 1.0 / (s0 * s0));
            let mu_star = sigma_star * (mu / sigma + m0 / (s0 * s0));
            let g = mu_star - mu;
            (mean, g, (sigma_star - sigma) + g * g)
        }
    };
    ChannelMoments {
        mean,
        gain: DVector::from_element(1, gain),
        spread: DMatrix::from_element(1, 1, spread),
    }
}

/// Closure evaluation: drift and channel moments under the current belief.
fn closure_moments(
    belief: &GaussianBelief,
    model: &JumpDiffusionModel,
    obs: &PointProcessObsModel,
    closure: &GaussianClosureSpec,
    t: f64,
) -> Result<(DriftMoments, Vec<ChannelMoments>)> {
    match *closure {
        GaussianClosureSpec::AnalyticFamily => {
            if model.dim() != 1 {
                return Err(Error::Model(
                    "analytic closure is available for scalar states only".into(),
                ));
            }
            let drift_fam = model.drift_family().ok_or_else(|| {
                Error::Model("analytic closure needs a registered drift family".into())
            })?;
            let families = obs.channel_families().ok_or_else(|| {
                Error::Model("analytic closure needs registered rate families".into())
            })?;
            let (mu, sigma) = (belief.mean1(), belief.var1());
            let drift = DriftMoments {
                mean: DVector::from_element(1, drift_fam.gaussian_mean(mu, sigma)),
                x_cov: DMatrix::from_element(1, 1, drift_fam.gaussian_cross_cov(mu, sigma)),
            };
            let channels = families
                .iter()
                .map(|fam| analytic_channel_moments(fam, mu, sigma))
                .collect();
            Ok((drift, channels))
        }
        GaussianClosureSpec::GaussHermite { order } => {
            gauss_hermite_moments(belief, model, obs, order, t)
        }
    }
}

fn gauss_hermite_moments(
    belief: &GaussianBelief,
    model: &JumpDiffusionModel,
    obs: &PointProcessObsModel,
    order: usize,
    t: f64,
) -> Result<(DriftMoments, Vec<ChannelMoments>)> {
    let dim = model.dim();
    if dim > 2 {
        return Err(Error::Model(format!(
            "quadrature closure is tensorized up to dimension 2, state has dimension {dim}"
        )));
    }
    if order < 5 || order % 2 == 0 {
        return Err(Error::Config(format!(
            "quadrature order must be odd and ≥ 5, got {order}"
        )));
    }
    let (nodes, weights) = gauss_hermite_rule(order)?;
    let mu = belief.mean();
    let root = cov_sqrt(belief.cov()) * 2.0_f64.sqrt(); // x = μ + root · z

    let l = obs.obs_dim();
    let mut f_mean: DVector<f64> = DVector::zeros(dim);
    let mut xf_mean: DMatrix<f64> = DMatrix::zeros(dim, dim); // ⟨X fᵀ⟩
    let mut h_mean = vec![0.0; l];
    let mut hx_mean = vec![DVector::zeros(dim); l];
    let mut hxx_mean = vec![DMatrix::zeros(dim, dim); l];

    let mut f_buf = vec![0.0; dim];
    let mut h_buf = vec![0.0; l];
    let mut x = DVector::zeros(dim);
    let n_points = if dim == 1 { order } else { order * order };
    for idx in 0..n_points {
        let (w, z0, z1) = if dim == 1 {
            (weights[idx], nodes[idx], 0.0)
        } else {
            let (i, j) = (idx / order, idx % order);
            (weights[i] * weights[j], nodes[i], nodes[j])
        };
        for r in 0..dim {
            x[r] = mu[r] + root[(r, 0)] * z0 + if dim == 2 { root[(r, 1)] * z1 } else { 0.0 };
        }
        model.drift_into(x.as_slice(), t, &mut f_buf);
        obs.rate_into(x.as_slice(), &mut h_buf);
        for r in 0..dim {
            f_mean[r] += w * f_buf[r];
            for c in 0..dim {
                xf_mean[(r, c)] += w * x[r] * f_buf[c];
            }
        }
        for (i, &h) in h_buf.iter().enumerate() {
            h_mean[i] += w * h;
            for r in 0..dim {
                hx_mean[i][r] += w * h * x[r];
                for c in 0..dim {
                    hxx_mean[i][(r, c)] += w * h * x[r] * x[c];
                }
            }
        }
    }

    let finite = f_mean.iter().all(|v| v.is_finite())
        && xf_mean.iter().all(|v| v.is_finite())
        && h_mean.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::Numerical(
            "quadrature closure produced non-finite moments (diverging drift or rate)".into(),
        ));
    }

    let drift = DriftMoments {
        x_cov: &xf_mean - mu * f_mean.transpose(),
        mean: f_mean,
    };
    let second = belief.cov() + mu * mu.transpose(); // exact ⟨XXᵀ⟩
    let channels = (0..l)
        .map(|i| {
            let hbar = h_mean[i];
            let x_cov = &hx_mean[i] - hbar * mu; // cov(h, X)
            let xx_cov = &hxx_mean[i] - hbar * &second; // cov(h, XXᵀ)
            let spread_raw = &xx_cov - &x_cov * mu.transpose() - mu * x_cov.transpose();
            ChannelMoments {
                mean: hbar,
                gain: x_cov / hbar,
                spread: spread_raw / hbar,
            }
        })
        .collect();
    Ok((drift, channels))
}

/// One Euler step of the Gaussian assumed-density filter for point-process
/// observations:
///
/// ```text
/// μ += ⟨f⟩ dt + Σᵢ gᵢ (dNᵢ − ⟨hᵢ⟩ dt)
/// Σ += (cov(X,fᵀ) + cov(f,Xᵀ) + Σx) dt
///      + Σᵢ spreadᵢ (dNᵢ − ⟨hᵢ⟩ dt) − Σᵢ gᵢ gᵢᵀ dNᵢ
/// ```
///
/// with `gᵢ = cov(X, hᵢ)/⟨hᵢ⟩` and `spreadᵢ` the normalized second-moment
/// bracket (see `ChannelMoments`). A channel whose expected rate is not
/// strictly positive under the current belief is an error, as is a closure
/// that returns non-finite moments.
pub fn adf_pp_step(
    belief: &GaussianBelief,
    model: &JumpDiffusionModel,
    obs: &PointProcessObsModel,
    closure: &GaussianClosureSpec,
    dn: &[u8],
    t: f64,
    dt: f64,
) -> Result<GaussianStep> {
    ensure_diffusion_only(model)?;
    if dn.len() != obs.obs_dim() {
        return Err(Error::Shape(format!(
            "got {} event indicators for {} channels",
            dn.len(),
            obs.obs_dim()
        )));
    }
    let (drift, channels) = closure_moments(belief, model, obs, closure, t)?;

    let mu = belief.mean();
    let sigma = belief.cov();
    let sigma_x = model.noise_cov(mu, t);

    let mut mean = mu + &drift.mean * dt;
    let mut cov = sigma + (&drift.x_cov + drift.x_cov.transpose() + sigma_x) * dt;
    for (i, ch) in channels.iter().enumerate() {
        if !(ch.mean > 0.0) || !ch.mean.is_finite() {
            return Err(Error::Numerical(format!(
                "closure gave nonpositive expected rate {} on channel {i}",
                ch.mean
            )));
        }
        let dni = f64::from(dn[i]);
        mean += &ch.gain * (dni - ch.mean * dt);
        // The event terms are grouped as (spread − gain gainᵀ)·dN so the
        // exponential family's cancellation holds exactly in floating
        // point, not merely to roundoff.
        cov -= &ch.spread * (ch.mean * dt);
        if dn[i] == 1 {
            cov += &ch.spread - &ch.gain * ch.gain.transpose();
        }
    }

    let (cov, clamped) = clamp_psd(&cov)?;
    Ok(GaussianStep {
        belief: GaussianBelief::new(mean, cov)?,
        clamped,
    })
}

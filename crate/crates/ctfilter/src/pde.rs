//! One-dimensional finite-volume reference solver for the evolution of
//! probability densities: the Fokker–Planck / master equation of the prior
//! signal, and its observation-conditioned variants (the normalized and
//! unnormalized filtering equations for Gaussian-noise observations and the
//! normalized equation for point-process observations).
//!
//! This module is the ground-truth oracle the rest of the crate is tested
//! against: it makes no Gaussian or particle approximation, only a grid
//! discretization whose error is controlled by cell size and step size.
//!
//! Scheme. The density lives on a uniform cell-centered grid with zero-flux
//! (reflecting) boundaries, and prediction steps are explicit Euler in flux
//! form, so mass is conserved to roundoff by construction:
//!
//! ```text
//! pᵢ ← pᵢ − (dt/Δx)(F_{i+1/2} − F_{i−1/2}),         F_{−1/2} = F_{n−1/2} = 0.
//! ```
//!
//! The interface flux discretizes `F = f·p − D ∂ₓp` (with `D = ½G²`) by
//! exponential fitting (the Scharfetter–Gummel flux): with the cell Péclet
//! number `u = fΔx/D`,
//!
//! ```text
//! F_{i+1/2} = (D/Δx)·[B(−u) pᵢ − B(u) pᵢ₊₁],        B(z) = z/(eᶻ − 1),
//! ```
//!
//! which limits to central differencing of the diffusion for `|u| → 0` and
//! to pure upwind differencing of the drift for `|u| → ∞`, and — decisively
//! for an oracle — reproduces drift–diffusion stationary densities to
//! O(Δx²) instead of the O(Δx) of plain upwinding, whose artificial
//! diffusion `|f|Δx/2` would visibly bias the stationary variance at
//! practical grid sizes. Pure advection (`D = 0`) falls back to upwinding.
//!
//! Jumps enter through the master-equation exchange term
//! `Σₖ λₖ(x−Jₖ)p(x−Jₖ) − λₖ(x)p(x)` with each constant amplitude snapped to
//! the nearest whole number of cells (warned once when the snap misses by
//! more than 10% of a cell); mass jumping past a boundary is deposited in
//! the boundary cell, keeping the exchange conservative.
//!
//! Observation updates are multiplicative — the density after a prediction
//! step is multiplied cell-wise by the first-order likelihood factor,
//! negatives are clamped to zero (the clamped mass is returned so callers
//! can assert it stays negligible), and the density is renormalized except
//! in the unnormalized variant, whose total mass carries the likelihood
//! information. Each conditioned step takes `n_substeps` prediction
//! substeps per observation increment so the stiff stability bound on the
//! prediction can be respected without shrinking the observation
//! resolution; [`cfl_substeps`] computes a safe count.

use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{GaussianObsModel, JumpDiffusionModel, PointProcessObsModel};

/// Normalized grid densities must integrate to 1 within this tolerance.
pub const GRID_MASS_TOL: f64 = 1e-8;

static JUMP_SNAP_WARNING: AtomicBool = AtomicBool::new(false);

// ---------------------------------------------------------------------------
// Grid density
// ---------------------------------------------------------------------------

/// A density on a uniform cell-centered grid over `[xmin, xmax]`: cell `i`
/// is centered at `xmin + (i + ½)Δx` and carries a nonnegative density
/// value (units 1/x), so `Σ values·Δx` is the total mass — 1 for
/// normalized densities, free-running for unnormalized ones.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    xmin: f64,
    xmax: f64,
    values: Vec<f64>,
}

impl GridDensity {
    /// Wraps explicit cell values after validating geometry and
    /// nonnegativity. The values are taken as-is (not renormalized), so
    /// unnormalized densities can be represented.
    pub fn new(xmin: f64, xmax: f64, values: Vec<f64>) -> Result<Self> {
        if !(xmax > xmin) || !xmin.is_finite() || !xmax.is_finite() {
            return Err(Error::Config(format!(
                "grid domain [{xmin}, {xmax}] is empty or not finite"
            )));
        }
        if values.is_empty() {
            return Err(Error::Config("grid must have at least one cell".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Model(
                "grid density values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { xmin, xmax, values })
    }

    /// Uniform (maximum-entropy) density on the domain.
    pub fn uniform(xmin: f64, xmax: f64, n_cells: usize) -> Result<Self> {
        let v = 1.0 / (xmax - xmin);
        Self::new(xmin, xmax, vec![v; n_cells])
    }

    /// Density from a pointwise function evaluated at cell centers, then
    /// normalized; errors when the function is nowhere positive on the grid.
    pub fn from_fn(
        xmin: f64,
        xmax: f64,
        n_cells: usize,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let mut dens = Self::new(xmin, xmax, vec![0.0; n_cells])?;
        for i in 0..n_cells {
            let v = f(dens.cell_center(i));
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Model(format!(
                    "density function returned {v} at x = {}",
                    dens.cell_center(i)
                )));
            }
            dens.values[i] = v;
        }
        dens.normalize()?;
        Ok(dens)
    }

    /// Truncated Gaussian density with the given mean and variance.
    pub fn from_gaussian(
        xmin: f64,
        xmax: f64,
        n_cells: usize,
        mean: f64,
        var: f64,
    ) -> Result<Self> {
        if !(var > 0.0) {
            return Err(Error::Model(format!("variance must be positive, got {var}")));
        }
        Self::from_fn(xmin, xmax, n_cells, |x| {
            (-(x - mean).powi(2) / (2.0 * var)).exp()
        })
    }

    /// Left domain edge.
    pub fn xmin(&self) -> f64 {
        self.xmin
    }

    /// Right domain edge.
    pub fn xmax(&self) -> f64 {
        self.xmax
    }

    /// Number of cells.
    pub fn n_cells(&self) -> usize {
        self.values.len()
    }

    /// Cell width `Δx`.
    pub fn dx(&self) -> f64 {
        (self.xmax - self.xmin) / self.values.len() as f64
    }

    /// Center coordinate of cell `i`.
    pub fn cell_center(&self, i: usize) -> f64 {
        self.xmin + (i as f64 + 0.5) * self.dx()
    }

    /// Cell density values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Total mass `Σ values·Δx`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dx()
    }

    /// Rescales to unit mass; errors when the current mass is zero or not
    /// finite. A density already at exactly unit mass is left untouched.
    pub fn normalize(&mut self) -> Result<()> {
        let mass = self.mass();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::ZeroLikelihood(format!(
                "grid density mass is {mass}; cannot normalize"
            )));
        }
        if mass != 1.0 {
            for v in &mut self.values {
                *v /= mass;
            }
        }
        Ok(())
    }

    /// Grid expectation `∫ g(x) p(x) dx ≈ Σ g(xᵢ) pᵢ Δx`.
    pub fn expectation(&self, g: impl Fn(f64) -> f64) -> f64 {
        let dx = self.dx();
        (0..self.values.len())
            .map(|i| g(self.cell_center(i)) * self.values[i] * dx)
            .sum()
    }

    /// Posterior mean of the grid density.
    pub fn mean(&self) -> f64 {
        self.expectation(|x| x)
    }

    /// Posterior variance of the grid density.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.expectation(|x| (x - m).powi(2))
    }

    /// L1 distance `∫|p − q| dx` to a density on the identical grid.
    pub fn l1_distance(&self, other: &GridDensity) -> Result<f64> {
        if self.xmin != other.xmin
            || self.xmax != other.xmax
            || self.values.len() != other.values.len()
        {
            return Err(Error::Shape(
                "L1 distance requires identical grids (domain and cell count)".into(),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.dx())
    }

    /// Writes the density as CSV (`x,p` per cell).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "x,p")?;
        for i in 0..self.values.len() {
            writeln!(out, "{},{}", self.cell_center(i), self.values[i])?;
        }
        out.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Prediction step (Fokker–Planck / master equation)
// ---------------------------------------------------------------------------

/// The Bernoulli function `B(z) = z/(eᶻ − 1)` of exponential fitting,
/// continuously extended by `B(0) = 1`.
fn bernoulli(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else {
        z / z.exp_m1()
    }
}

/// Context shared by the prediction ops: per-interface drift and diffusion,
/// per-cell jump bookkeeping, all evaluated once per (grid, model, t).
struct GridModel {
    n: usize,
    dx: f64,
    /// Drift at the n−1 interior interfaces.
    drift_iface: Vec<f64>,
    /// Diffusion coefficient `D = ½G²` at the interior interfaces.
    diff_iface: Vec<f64>,
    /// Largest `G²` anywhere on the grid (stability bound).
    max_g2: f64,
    /// Largest `|f|` anywhere on the grid (substep heuristic).
    max_f: f64,
    /// Per-channel cell offsets of the constant jump amplitudes.
    jump_offsets: Vec<isize>,
    /// Per-channel rates at every cell center (channel-major).
    jump_rates: Vec<f64>,
}

impl GridModel {
    fn build(dens: &GridDensity, model: &JumpDiffusionModel, t: f64) -> Result<Self> {
        if model.dim() != 1 {
            return Err(Error::Model(
                "the grid solver is one-dimensional; got a multivariate signal model".into(),
            ));
        }
        let n = dens.n_cells();
        let dx = dens.dx();
        let mut drift_iface = Vec::with_capacity(n.saturating_sub(1));
        let mut diff_iface = Vec::with_capacity(n.saturating_sub(1));
        let mut buf = [0.0];
        let mut max_g2: f64 = 0.0;
        let mut max_f: f64 = 0.0;
        for i in 0..n {
            // Track extremes at cell centers too, so the stability bound sees
            // the whole grid even for one- and two-cell grids.
            let xc = [dens.cell_center(i)];
            model.drift_into(&xc, t, &mut buf);
            max_f = max_f.max(buf[0].abs());
            model.diffusion_into(&xc, t, &mut buf);
            max_g2 = max_g2.max(buf[0] * buf[0]);
            if i + 1 < n {
                let xi = [dens.xmin + (i as f64 + 1.0) * dx];
                model.drift_into(&xi, t, &mut buf);
                drift_iface.push(buf[0]);
                max_f = max_f.max(buf[0].abs());
                model.diffusion_into(&xi, t, &mut buf);
                diff_iface.push(0.5 * buf[0] * buf[0]);
                max_g2 = max_g2.max(buf[0] * buf[0]);
            }
        }

        let k = model.n_jump_channels();
        let mut jump_offsets = Vec::with_capacity(k);
        let mut jump_rates = vec![0.0; k * n];
        if k > 0 {
            // Amplitudes must be state-independent on the grid: compare the
            // evaluation at every cell center against the first.
            let mut amp_first = vec![0.0; k];
            let mut amp = vec![0.0; k];
            model.jump_amplitude_into(&[dens.cell_center(0)], t, &mut amp_first);
            for i in 1..n {
                model.jump_amplitude_into(&[dens.cell_center(i)], t, &mut amp);
                for j in 0..k {
                    if (amp[j] - amp_first[j]).abs() > 1e-9 * (1.0 + amp_first[j].abs()) {
                        return Err(Error::Model(format!(
                            "grid solver requires constant jump amplitudes; channel {j} varies \
                             across the domain"
                        )));
                    }
                }
            }
            for &a in &amp_first {
                let offset = (a / dx).round();
                if (a / dx - offset).abs() > 0.1
                    && !JUMP_SNAP_WARNING.swap(true, Ordering::Relaxed)
                {
                    eprintln!(
                        "warning: jump amplitude {a} is not a whole number of grid cells \
                         (Δx = {dx}); snapping to {offset} cells"
                    );
                }
                jump_offsets.push(offset as isize);
            }
            let mut rates = vec![0.0; k];
            for i in 0..n {
                model.jump_rate_into(&[dens.cell_center(i)], &mut rates);
                for j in 0..k {
                    if rates[j] < 0.0 {
                        return Err(Error::Model(format!(
                            "negative jump rate {} on channel {j}",
                            rates[j]
                        )));
                    }
                    jump_rates[j * n + i] = rates[j];
                }
            }
        }

        Ok(Self {
            n,
            dx,
            drift_iface,
            diff_iface,
            max_g2,
            max_f,
            jump_offsets,
            jump_rates,
        })
    }

    /// The checked stability precondition: explicit diffusion requires
    /// `dt ≤ Δx²/max(G²)`.
    fn check_cfl(&self, dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("step size must be positive, got {dt}")));
        }
        if self.max_g2 > 0.0 {
            let bound = self.dx * self.dx / self.max_g2;
            if dt > bound * (1.0 + 1e-12) {
                return Err(Error::Config(format!(
                    "step size {dt} violates the diffusion stability bound Δx²/max(G²) = \
                     {bound:e}; reduce dt or take substeps"
                )));
            }
        }
        Ok(())
    }

    /// One conservative explicit Euler step, written into `out` (no
    /// clamping, no renormalization — callers own those).
    fn advance_raw(&self, values: &[f64], dt: f64, out: &mut [f64]) {
        let n = self.n;
        out.copy_from_slice(values);
        // Drift–diffusion exchange through interior interfaces.
        for i in 0..n.saturating_sub(1) {
            let f = self.drift_iface[i];
            let d = self.diff_iface[i];
            let flux = if d > 0.0 {
                let u = f * self.dx / d;
                d / self.dx * (bernoulli(-u) * values[i] - bernoulli(u) * values[i + 1])
            } else if f >= 0.0 {
                f * values[i]
            } else {
                f * values[i + 1]
            };
            out[i] -= dt / self.dx * flux;
            out[i + 1] += dt / self.dx * flux;
        }
        // Master-equation exchange: mass leaves each cell at its channel
        // rate and lands `offset` cells away, clamped into the domain.
        for (j, &offset) in self.jump_offsets.iter().enumerate() {
            let rates = &self.jump_rates[j * n..(j + 1) * n];
            for i in 0..n {
                let moved = rates[i] * values[i] * dt;
                let target = (i as isize + offset).clamp(0, n as isize - 1) as usize;
                out[i] -= moved;
                out[target] += moved;
            }
        }
    }
}

/// A safe prediction substep count for resolving the interval `dt`: the
/// returned `k` keeps `dt/k` inside both the diffusion bound `Δx²/max(G²)`
/// and an advection bound `Δx/max|f|`, with a 0.9 safety factor.
pub fn cfl_substeps(dens: &GridDensity, model: &JumpDiffusionModel, t: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("interval must be positive, got {dt}")));
    }
    let gm = GridModel::build(dens, model, t)?;
    let rate = gm.max_f / gm.dx + gm.max_g2 / (gm.dx * gm.dx);
    if rate <= 0.0 {
        return Ok(1);
    }
    Ok(((dt * rate / 0.9).ceil() as usize).max(1))
}

/// One explicit Euler step of the prior density evolution
/// `∂ₜp = −∂ₓ(fp) + ½∂ₓ²(G²p) + Σₖ λₖ(x−Jₖ)p(x−Jₖ) − λₖ(x)p(x)`
/// with zero-flux boundaries, followed by renormalization. Errors when
/// `dt` violates the stability bound `Δx²/max(G²)`.
pub fn fokker_planck_step(dens: &mut GridDensity, model: &JumpDiffusionModel, t: f64, dt: f64) -> Result<()> {
    let gm = GridModel::build(dens, model, t)?;
    gm.check_cfl(dt)?;
    let mut out = vec![0.0; dens.n_cells()];
    gm.advance_raw(&dens.values, dt, &mut out);
    for v in &mut out {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    dens.values = out;
    dens.normalize()
}

/// Shared prediction stage of the conditioned steps: `n_substeps` raw
/// prediction substeps (each checked against the stability bound), without
/// renormalizing, so unnormalized densities keep their mass.
fn predict_substeps(
    dens: &mut GridDensity,
    model: &JumpDiffusionModel,
    t: f64,
    dt: f64,
    n_substeps: usize,
) -> Result<()> {
    if n_substeps == 0 {
        return Err(Error::Config("substep count must be at least 1".into()));
    }
    let sub = dt / n_substeps as f64;
    let mut out = vec![0.0; dens.n_cells()];
    for j in 0..n_substeps {
        let gm = GridModel::build(dens, model, t + j as f64 * sub)?;
        gm.check_cfl(sub)?;
        gm.advance_raw(&dens.values, sub, &mut out);
        std::mem::swap(&mut dens.values, &mut out);
    }
    Ok(())
}

/// Clamps negative cells to zero, returning the clamped mass (density times
/// Δx), so callers can assert it stays a negligible fraction of the total.
fn clamp_negative(dens: &mut GridDensity) -> f64 {
    let mut clamped = 0.0;
    for v in &mut dens.values {
        if *v < 0.0 {
            clamped -= *v;
            *v = 0.0;
        }
    }
    clamped * dens.dx()
}

/// Grid expectation of the observation function, centered on cell 0's
/// value so a state-independent observation yields `h(x) − ⟨h⟩ = 0`
/// exactly and the correction factor degenerates to 1 bit-for-bit.
fn grid_obs_mean(dens: &GridDensity, h_cells: &[f64], l: usize) -> Vec<f64> {
    let dx = dens.dx();
    let mut mean: Vec<f64> = h_cells[..l].to_vec();
    let mut corr = vec![0.0; l];
    for i in 0..dens.n_cells() {
        let w = dens.values[i] * dx;
        for r in 0..l {
            corr[r] += w * (h_cells[i * l + r] - h_cells[r]);
        }
    }
    for r in 0..l {
        mean[r] += corr[r];
    }
    mean
}

fn eval_obs_cells(dens: &GridDensity, obs: &GaussianObsModel, t: f64) -> Vec<f64> {
    let l = obs.obs_dim();
    let mut h_cells = vec![0.0; dens.n_cells() * l];
    for i in 0..dens.n_cells() {
        obs.obs_into(&[dens.cell_center(i)], t, &mut h_cells[i * l..(i + 1) * l]);
    }
    h_cells
}

/// One step of the normalized density filter for Gaussian-noise
/// observations: `n_substeps` prediction substeps, then cell-wise
/// multiplication by `1 + (h(x) − ⟨h⟩)ᵀΣy⁻¹(dY − ⟨h⟩dt)` with `⟨h⟩` taken
/// under the predicted density, clamping, and renormalization. Returns the
/// clamped mass.
pub fn kushner_step(
    dens: &mut GridDensity,
    model: &JumpDiffusionModel,
    obs: &GaussianObsModel,
    dy: &DVector<f64>,
    t: f64,
    dt: f64,
    n_substeps: usize,
) -> Result<f64> {
    let l = obs.obs_dim();
    if dy.len() != l {
        return Err(Error::Shape(format!(
            "observation increment has length {}, expected {l}",
            dy.len()
        )));
    }
    predict_substeps(dens, model, t, dt, n_substeps)?;
    let h_cells = eval_obs_cells(dens, obs, t);
    let h_mean = grid_obs_mean(dens, &h_cells, l);
    // v = Σy⁻¹ (dY − ⟨h⟩ dt), shared by all cells.
    let innovation = dy - DVector::from_row_slice(&h_mean) * dt;
    let v = obs.noise_inv() * innovation;
    for i in 0..dens.n_cells() {
        let mut corr = 0.0;
        for r in 0..l {
            corr += (h_cells[i * l + r] - h_mean[r]) * v[r];
        }
        dens.values[i] *= 1.0 + corr;
    }
    let clamped = clamp_negative(dens);
    dens.normalize()?;
    Ok(clamped)
}

/// One step of the unnormalized density filter: prediction substeps, then
/// multiplication by `1 + h(x)ᵀΣy⁻¹dY`, clamping — and no renormalization,
/// so the total mass carries the accumulated likelihood. Returns the
/// clamped mass.
pub fn zakai_step(
    dens: &mut GridDensity,
    model: &JumpDiffusionModel,
    obs: &GaussianObsModel,
    dy: &DVector<f64>,
    t: f64,
    dt: f64,
    n_substeps: usize,
) -> Result<f64> {
    let l = obs.obs_dim();
    if dy.len() != l {
        return Err(Error::Shape(format!(
            "observation increment has length {}, expected {l}",
            dy.len()
        )));
    }
    predict_substeps(dens, model, t, dt, n_substeps)?;
    let h_cells = eval_obs_cells(dens, obs, t);
    let v = obs.noise_inv() * dy;
    for i in 0..dens.n_cells() {
        let mut corr = 0.0;
        for r in 0..l {
            corr += h_cells[i * l + r] * v[r];
        }
        dens.values[i] *= 1.0 + corr;
    }
    Ok(clamp_negative(dens))
}

/// One step of the normalized density filter for point-process
/// observations: prediction substeps, then cell-wise multiplication by
/// `Πⱼ [1 + (hⱼ(x) − ⟨hⱼ⟩)/⟨hⱼ⟩ · (dNⱼ − ⟨hⱼ⟩dt)]`, clamping, and
/// renormalization. An event on a channel whose predicted mean rate is
/// zero is a zero-likelihood error. Returns the clamped mass.
pub fn pp_kushner_step(
    dens: &mut GridDensity,
    model: &JumpDiffusionModel,
    obs: &PointProcessObsModel,
    dn: &[u8],
    t: f64,
    dt: f64,
    n_substeps: usize,
) -> Result<f64> {
    let l = obs.obs_dim();
    if dn.len() != l {
        return Err(Error::Shape(format!(
            "got {} event indicators for {l} channels",
            dn.len()
        )));
    }
    predict_substeps(dens, model, t, dt, n_substeps)?;
    let n = dens.n_cells();
    let mut h_cells = vec![0.0; n * l];
    for i in 0..n {
        obs.rate_into(&[dens.cell_center(i)], &mut h_cells[i * l..(i + 1) * l]);
    }
    if h_cells.iter().any(|&h| h < 0.0) {
        return Err(Error::Model("rate callback returned a negative rate".into()));
    }
    let h_mean = grid_obs_mean(dens, &h_cells, l);
    for (j, &mean) in h_mean.iter().enumerate() {
        if dn[j] == 1 && !(mean > 0.0) {
            return Err(Error::ZeroLikelihood(format!(
                "event on channel {j} whose predicted mean rate is {mean}"
            )));
        }
    }
    for i in 0..n {
        let mut factor = 1.0;
        for j in 0..l {
            if h_mean[j] > 0.0 {
                factor *= 1.0
                    + (h_cells[i * l + j] - h_mean[j]) / h_mean[j]
                        * (f64::from(dn[j]) - h_mean[j] * dt);
            }
        }
        dens.values[i] *= factor;
    }
    let clamped = clamp_negative(dens);
    dens.normalize()?;
    Ok(clamped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{
        kalman_bucy_step, pp_finite_state_step, wonham_step, DiscreteBelief, GaussianBelief,
    };
    use crate::model::{DriftFamily, MarkovChainModel};
    use crate::rng::{stream, StreamTag};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::DMatrix;
    use rand_distr::{Distribution, StandardNormal};
    use std::sync::Arc;

    fn ou_model(a: f64, g: f64) -> JumpDiffusionModel {
        JumpDiffusionModel::scalar(DriftFamily::Linear { a: -a }, g).unwrap()
    }

    /// Two-cell grid whose master equation is the symmetric two-state chain
    /// with hazard `a`: two constant-amplitude channels of ±Δx; the copy
    /// that would jump past a boundary is clamped back into its own cell
    /// and cancels against its loss term.
    fn two_cell_chain(a: f64) -> (GridDensity, JumpDiffusionModel) {
        let dens = GridDensity::new(0.0, 1.0, vec![1.2, 0.8]).unwrap();
        let dx = dens.dx();
        let model = JumpDiffusionModel::new(
            1,
            Arc::new(|_x, _t, out: &mut [f64]| out[0] = 0.0),
            Arc::new(|_x, _t, out: &mut [f64]| out[0] = 0.0),
        )
        .unwrap()
        .with_jumps(
            2,
            Arc::new(move |_x, _t, out: &mut [f64]| {
                out[0] = dx;
                out[1] = -dx;
            }),
            Arc::new(move |_x, out: &mut [f64]| {
                out[0] = a;
                out[1] = a;
            }),
        );
        (dens, model)
    }

    /// Observation value read off the cell: left cell ↦ `table[0]`, right
    /// cell ↦ `table[1]` (for embedding finite-state filters on 2 cells).
    fn two_cell_obs(h0: f64, h1: f64, sigma_y: f64) -> GaussianObsModel {
        GaussianObsModel::new(
            1,
            Arc::new(move |x, _t, out: &mut [f64]| out[0] = if x[0] < 0.5 { h0 } else { h1 }),
            DMatrix::from_element(1, 1, sigma_y),
        )
        .unwrap()
    }

    #[test]
    fn static_model_leaves_density_bitwise_unchanged() {
        // Exact unit mass so renormalization is the identity.
        let mut dens = GridDensity::new(0.0, 1.0, vec![0.5, 2.0, 1.0, 0.5]).unwrap();
        assert_eq!(dens.mass(), 1.0);
        let before = dens.clone();
        let model = ou_model(0.0, 0.0);
        fokker_planck_step(&mut dens, &model, 0.0, 1e-2).unwrap();
        assert_eq!(dens, before);
    }

    #[test]
    fn prediction_step_conserves_mass_before_renormalization() {
        let model = JumpDiffusionModel::scalar(DriftFamily::DoubleWell { a: 4.0 }, 2.0_f64.sqrt())
            .unwrap()
            .with_jumps(
                1,
                Arc::new(|_x, _t, out: &mut [f64]| out[0] = 0.45),
                Arc::new(|x, out: &mut [f64]| out[0] = 3.0 * (1.0 + x[0].tanh())),
            );
        let dens = GridDensity::from_gaussian(-3.0, 3.0, 400, 0.4, 0.3).unwrap();
        let gm = GridModel::build(&dens, &model, 0.0).unwrap();
        let mut out = vec![0.0; dens.n_cells()];
        gm.advance_raw(dens.values(), 5e-5, &mut out);
        let mass_after: f64 = out.iter().sum::<f64>() * dens.dx();
        assert_abs_diff_eq!(mass_after, dens.mass(), epsilon = 1e-10);
    }

    #[test]
    fn ou_relaxes_to_analytic_stationary_density_and_refines() {
        // dX = −X dt + dW has stationary law 𝒩(0, ½) and the exact
        // transient law 𝒩(μ₀e^{−t}, ½ + (σ₀² − ½)e^{−2t}).
        let model = ou_model(1.0, 1.0);
        let l1_at = |n_cells: usize, dt: f64, t_end: f64| -> f64 {
            let mut dens = GridDensity::from_gaussian(-6.0, 6.0, n_cells, 1.0, 1.0).unwrap();
            let steps = (t_end / dt).round() as usize;
            for k in 0..steps {
                fokker_planck_step(&mut dens, &model, k as f64 * dt, dt).unwrap();
            }
            let mean = (-t_end).exp();
            let var = 0.5 + 0.5 * (-2.0 * t_end).exp();
            let target = GridDensity::from_gaussian(-6.0, 6.0, n_cells, mean, var).unwrap();
            dens.l1_distance(&target).unwrap()
        };
        let stationary = l1_at(800, 1e-4, 10.0);
        assert!(stationary <= 1e-3, "stationary L1 error {stationary:e} on 800 cells");
        // Refinement is measured on the transient (t = 1): the
        // exponential-fitting flux reproduces the OU stationary density
        // exactly (the midpoint rule is exact for a linear drift), so by
        // t = 10 the discretization error has no stationary component left
        // to refine. Halving Δx with dt ∝ Δx² cuts the transient error
        // fourfold (O(Δx²) space, O(dt) time).
        let coarse = l1_at(400, 4e-4, 1.0);
        let fine = l1_at(800, 1e-4, 1.0);
        assert!(
            coarse / fine >= 3.0,
            "refinement gain {:.2} (coarse {coarse:e}, fine {fine:e})",
            coarse / fine
        );
    }

    #[test]
    fn double_well_stationary_density_is_symmetric_and_bimodal() {
        // f = −4x(x²−1), G² = 2: stationary density ∝ exp(2x² − x⁴).
        let model = JumpDiffusionModel::scalar(DriftFamily::DoubleWell { a: 4.0 }, 2.0_f64.sqrt())
            .unwrap();
        let n_cells = 400;
        let mut dens = GridDensity::uniform(-3.0, 3.0, n_cells).unwrap();
        let dt = 4e-5_f64;
        let steps = (8.0 / dt).round() as usize;
        for k in 0..steps {
            fokker_planck_step(&mut dens, &model, k as f64 * dt, dt).unwrap();
        }
        let target =
            GridDensity::from_fn(-3.0, 3.0, n_cells, |x| (2.0 * x * x - x.powi(4)).exp()).unwrap();
        assert!(dens.l1_distance(&target).unwrap() < 5e-3);
        // Symmetry and both modes within one cell of ±1.
        let v = dens.values();
        let asym = (0..n_cells)
            .map(|i| (v[i] - v[n_cells - 1 - i]).abs())
            .fold(0.0, f64::max);
        assert!(asym < 1e-6, "asymmetry {asym:e}");
        let argmax = |lo: usize, hi: usize| -> f64 {
            let i = (lo..hi).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
            dens.cell_center(i)
        };
        let dx = dens.dx();
        assert!((argmax(0, n_cells / 2) + 1.0).abs() <= dx);
        assert!((argmax(n_cells / 2, n_cells) - 1.0).abs() <= dx);
    }

    #[test]
    fn violating_the_stability_bound_is_a_config_error() {
        let model = ou_model(1.0, 1.0);
        let mut dens = GridDensity::from_gaussian(-6.0, 6.0, 800, 0.0, 1.0).unwrap();
        let err = fokker_planck_step(&mut dens, &model, 0.0, 1e-2).unwrap_err();
        assert!(err.is_config(), "expected a config error, got {err}");
    }

    #[test]
    fn state_dependent_jump_amplitude_is_rejected() {
        let model = ou_model(0.0, 0.0).with_jumps(
            1,
            Arc::new(|x, _t, out: &mut [f64]| out[0] = x[0]),
            Arc::new(|_x, out: &mut [f64]| out[0] = 1.0),
        );
        let mut dens = GridDensity::uniform(0.0, 1.0, 10).unwrap();
        assert!(matches!(
            fokker_planck_step(&mut dens, &model, 0.0, 1e-3),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn two_cell_jump_grid_reproduces_the_chain_master_equation() {
        // p₁(t) relaxes as 0.5 + (p₁(0) − 0.5)e^{−2at}.
        let a = 0.7;
        let (mut dens, model) = two_cell_chain(a);
        let dt = 1e-4;
        let steps = 10_000;
        for k in 0..steps {
            fokker_planck_step(&mut dens, &model, k as f64 * dt, dt).unwrap();
        }
        let t = steps as f64 * dt;
        let p1 = dens.values()[0] * dens.dx();
        let expected = 0.5 + (0.6 - 0.5) * (-2.0 * a * t).exp();
        assert_abs_diff_eq!(p1, expected, epsilon = 1e-4);
    }

    #[test]
    fn substep_helper_respects_both_stability_bounds() {
        let model = JumpDiffusionModel::scalar(DriftFamily::DoubleWell { a: 4.0 }, 2.0_f64.sqrt())
            .unwrap();
        let dens = GridDensity::uniform(-3.0, 3.0, 400).unwrap();
        let dt = 1e-3;
        let k = cfl_substeps(&dens, &model, 0.0, dt).unwrap();
        let sub = dt / k as f64;
        let dx = dens.dx();
        assert!(sub <= dx * dx / 2.0, "diffusion bound violated at {k} substeps");
        // max |f| on [−3, 3] is 4·3·8 = 96.
        assert!(sub <= dx / 96.0 / 0.89, "advection bound violated at {k} substeps");
        // Static models need exactly one substep.
        let static_dens = GridDensity::uniform(0.0, 1.0, 4).unwrap();
        assert_eq!(cfl_substeps(&static_dens, &ou_model(0.0, 0.0), 0.0, dt).unwrap(), 1);
    }

    #[test]
    fn kushner_with_state_independent_observation_is_pure_prediction() {
        let model = ou_model(1.0, 1.0);
        let obs = GaussianObsModel::new(
            1,
            Arc::new(|_x, _t, out: &mut [f64]| out[0] = 2.5),
            DMatrix::from_element(1, 1, 0.3),
        )
        .unwrap();
        let mut cond = GridDensity::from_gaussian(-6.0, 6.0, 200, 0.4, 0.6).unwrap();
        let mut prior = cond.clone();
        let dy = DVector::from_vec(vec![0.17]);
        let clamped = kushner_step(&mut cond, &model, &obs, &dy, 0.0, 1e-4, 1).unwrap();
        fokker_planck_step(&mut prior, &model, 0.0, 1e-4).unwrap();
        assert_eq!(clamped, 0.0);
        assert_eq!(cond, prior);
    }

    #[test]
    fn kushner_tracks_the_linear_gaussian_closed_form() {
        // A = −1, B = 1, Σx = Σy = 1: the grid mean and variance must follow
        // the exact linear-Gaussian filter.
        let model = ou_model(1.0, 1.0);
        let obs = GaussianObsModel::scalar_linear(1.0, 1.0).unwrap();
        let mut dens = GridDensity::from_gaussian(-6.0, 6.0, 800, 0.3, 0.8).unwrap();
        let mut belief = GaussianBelief::scalar(0.3, 0.8).unwrap();
        let a = DMatrix::from_element(1, 1, -1.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let sigma_x = DMatrix::from_element(1, 1, 1.0);
        let dt = 1e-4_f64;
        let mut rng = stream(11, StreamTag::GaussianObs, 0);
        for k in 0..10_000 {
            let xi: f64 = StandardNormal.sample(&mut rng);
            // An arbitrary but plausible observation path.
            let dy = DVector::from_vec(vec![0.4 * dt + dt.sqrt() * xi]);
            kushner_step(&mut dens, &model, &obs, &dy, k as f64 * dt, dt, 1).unwrap();
            belief = kalman_bucy_step(&a, &b, &sigma_x, obs.noise_inv(), &belief, &dy, dt).unwrap();
        }
        assert_relative_eq!(dens.mean(), belief.mean1(), max_relative = 1e-3);
        // The exact filter's variance is path-independent, but the grid
        // filter's variance responds to the realized dY² of each step, an
        // intrinsic O(√dt) fluctuation (measured ≈ 0.25·√dt on this path),
        // so the variance tolerance is an order looser than the mean's.
        assert_relative_eq!(dens.variance(), belief.var1(), max_relative = 1e-2);
    }

    #[test]
    fn kushner_two_cell_embedding_matches_the_finite_state_filter() {
        // On two delta cells the density filter and the finite-state filter
        // discretize the same equation; their one-interval difference is
        // O(dt²), so a tenfold dt refinement shrinks it a hundredfold.
        let a = 0.9;
        let (h0, h1, sigma_y) = (-1.0, 1.0, 0.8);
        let chain = MarkovChainModel::two_state_symmetric(a).unwrap();
        let table = DMatrix::from_row_slice(1, 2, &[h0, h1]);
        let gap_at = |dt: f64| -> f64 {
            let (mut dens, model) = two_cell_chain(a);
            let obs = two_cell_obs(h0, h1, sigma_y);
            let belief = DiscreteBelief::new(DVector::from_vec(vec![0.6, 0.4])).unwrap();
            let dy = DVector::from_vec(vec![0.3 * dt]);
            kushner_step(&mut dens, &model, &obs, &dy, 0.0, dt, 1).unwrap();
            let stepped =
                wonham_step(&chain, &table, obs.noise_inv(), &belief, &dy, dt).unwrap();
            (dens.values()[0] * dens.dx() - stepped.prob(0)).abs()
        };
        let coarse = gap_at(1e-3);
        let fine = gap_at(1e-4);
        assert!(coarse < 1e-5, "coarse gap {coarse:e}");
        let ratio = coarse / fine;
        assert!(
            (50.0..200.0).contains(&ratio),
            "contraction ratio {ratio} (coarse {coarse:e}, fine {fine:e})"
        );
    }

    #[test]
    fn zakai_mass_is_constant_without_observation_drift() {
        let model = ou_model(1.0, 1.0);
        let obs = GaussianObsModel::new(
            1,
            Arc::new(|_x, _t, out: &mut [f64]| out[0] = 0.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let mut dens = GridDensity::from_gaussian(-6.0, 6.0, 200, 0.0, 1.0).unwrap();
        let mass0 = dens.mass();
        for k in 0..100 {
            let dy = DVector::from_vec(vec![0.01 * ((k % 7) as f64 - 3.0)]);
            zakai_step(&mut dens, &model, &obs, &dy, k as f64 * 1e-4, 1e-4, 1).unwrap();
        }
        assert_abs_diff_eq!(dens.mass(), mass0, epsilon = 1e-10);
    }

    #[test]
    fn zakai_mass_increment_carries_the_mean_observation() {
        let model = ou_model(1.0, 1.0);
        let obs = GaussianObsModel::scalar_linear(1.0, 0.5).unwrap();
        let mut dens = GridDensity::from_gaussian(-6.0, 6.0, 400, 0.7, 0.4).unwrap();
        let dy = DVector::from_vec(vec![0.02]);
        let dt = 1e-4;
        // Predict separately to read off ⟨h⟩ under the predicted density.
        let mut predicted = dens.clone();
        predict_substeps(&mut predicted, &model, 0.0, dt, 1).unwrap();
        let h_mean = predicted.expectation(|x| x);
        let mass_before = dens.mass();
        zakai_step(&mut dens, &model, &obs, &dy, 0.0, dt, 1).unwrap();
        let expected = mass_before * (1.0 + h_mean * dy[0] / 0.5);
        assert_abs_diff_eq!(dens.mass(), expected, epsilon = 1e-12);
    }

    #[test]
    fn normalized_zakai_approaches_kushner_as_dt_shrinks() {
        let model = ou_model(1.0, 1.0);
        let obs = GaussianObsModel::scalar_linear(1.0, 1.0).unwrap();
        // Per-step gap comparison: the same K innovations ξₖ drive both
        // resolutions (dY = 0.5 dt + √dt ξₖ), so the horizon shrinks with
        // dt and the accumulated gap contracts linearly in dt. Comparing
        // over a fixed horizon instead would mix in the O(√dt) martingale
        // part of the gap and hide the contraction.
        let mut rng = stream(12, StreamTag::GaussianObs, 0);
        let noise: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let l1_at = |dt: f64| -> f64 {
            let mut kush = GridDensity::from_gaussian(-6.0, 6.0, 200, 0.3, 0.8).unwrap();
            let mut zak = kush.clone();
            for (k, xi) in noise.iter().enumerate() {
                let dy = DVector::from_vec(vec![0.5 * dt + dt.sqrt() * xi]);
                kushner_step(&mut kush, &model, &obs, &dy, k as f64 * dt, dt, 1).unwrap();
                zakai_step(&mut zak, &model, &obs, &dy, k as f64 * dt, dt, 1).unwrap();
            }
            zak.normalize().unwrap();
            zak.l1_distance(&kush).unwrap()
        };
        let coarse = l1_at(1e-3);
        let fine = l1_at(1e-4);
        assert!(coarse < 1e-2, "coarse gap {coarse:e}");
        let ratio = coarse / fine;
        assert!(
            (8.0..40.0).contains(&ratio),
            "contraction ratio {ratio} (coarse {coarse:e}, fine {fine:e})"
        );
    }

    #[test]
    fn pp_kushner_with_constant_rates_is_pure_prediction() {
        let model = ou_model(1.0, 1.0);
        let obs = PointProcessObsModel::from_families(
            vec![crate::model::RateFamily::Constant { c: 4.0 }],
            4.0,
        )
        .unwrap();
        let mut cond = GridDensity::from_gaussian(-6.0, 6.0, 200, 0.2, 0.5).unwrap();
        let mut prior = cond.clone();
        for (k, dn) in [[0u8], [1], [0], [1]].iter().enumerate() {
            let t = k as f64 * 1e-4;
            pp_kushner_step(&mut cond, &model, &obs, dn, t, 1e-4, 1).unwrap();
            fokker_planck_step(&mut prior, &model, t, 1e-4).unwrap();
        }
        assert_eq!(cond, prior);
    }

    #[test]
    fn pp_kushner_two_cell_embedding_matches_the_finite_state_filter() {
        let a = 0.8;
        let (r_minus, r_plus) = (1.0, 4.0);
        let chain = MarkovChainModel::two_state_symmetric(a).unwrap();
        let table = DMatrix::from_row_slice(1, 2, &[r_minus, r_plus]);
        let gap_at = |dt: f64, dn: u8| -> f64 {
            let (mut dens, model) = two_cell_chain(a);
            let obs = PointProcessObsModel::new(
                1,
                Arc::new(move |x, out: &mut [f64]| {
                    out[0] = if x[0] < 0.5 { r_minus } else { r_plus }
                }),
                1.0,
            )
            .unwrap();
            let belief = DiscreteBelief::new(DVector::from_vec(vec![0.6, 0.4])).unwrap();
            pp_kushner_step(&mut dens, &model, &obs, &[dn], 0.0, dt, 1).unwrap();
            let stepped = pp_finite_state_step(&chain, &table, &belief, &[dn], dt).unwrap();
            (dens.values()[0] * dens.dx() - stepped.prob(0)).abs()
        };
        // Between events both filters apply the same compensator drift and
        // differ only at O(dt²). On an event step the density filter's
        // multiplicative factor 1 + (h − ⟨h⟩)/⟨h⟩ bundles the compensator
        // cross-term that the finite-state filter keeps inside its
        // exponential update, so event steps agree at first order only.
        let coarse = gap_at(1e-3, 0);
        let fine = gap_at(1e-4, 0);
        assert!(coarse < 1e-4, "coarse gap {coarse:e} (dn = 0)");
        let ratio = coarse / fine;
        assert!(
            (50.0..200.0).contains(&ratio),
            "contraction ratio {ratio} for dn = 0"
        );
        let coarse = gap_at(1e-3, 1);
        let fine = gap_at(1e-4, 1);
        assert!(coarse < 1e-3, "coarse gap {coarse:e} (dn = 1)");
        let ratio = coarse / fine;
        assert!(
            (5.0..30.0).contains(&ratio),
            "contraction ratio {ratio} for dn = 1"
        );
    }

    #[test]
    fn pp_kushner_event_shifts_mass_toward_the_firing_sensor() {
        // Double-well tracking with two bump sensors at the modes: an event
        // on the sensor at +1 must move posterior mass toward +1.
        let model = JumpDiffusionModel::scalar(DriftFamily::DoubleWell { a: 4.0 }, 2.0_f64.sqrt())
            .unwrap();
        let obs = PointProcessObsModel::from_families(
            vec![
                crate::model::RateFamily::GaussianBump {
                    g0: 50.0,
                    s0: 0.5,
                    m0: 1.0,
                },
                crate::model::RateFamily::GaussianBump {
                    g0: 50.0,
                    s0: 0.5,
                    m0: -1.0,
                },
            ],
            50.0,
        )
        .unwrap();
        let mut dens = GridDensity::from_fn(-3.0, 3.0, 300, |x| {
            (2.0 * x * x - x.powi(4)).exp()
        })
        .unwrap();
        let mass_plus_before = dens.expectation(|x| f64::from(x > 0.0));
        let k = cfl_substeps(&dens, &model, 0.0, 1e-3).unwrap();
        pp_kushner_step(&mut dens, &model, &obs, &[1, 0], 0.0, 1e-3, k).unwrap();
        let mass_plus_after = dens.expectation(|x| f64::from(x > 0.0));
        assert!(
            mass_plus_after > mass_plus_before + 0.1,
            "event moved positive-mode mass {mass_plus_before:.3} → {mass_plus_after:.3}"
        );
    }

    #[test]
    fn density_csv_snapshot_round_trips_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("density.csv");
        let dens = GridDensity::from_gaussian(-1.0, 1.0, 8, 0.0, 0.2).unwrap();
        dens.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 9);
        assert_eq!(lines[0], "x,p");
        let first: Vec<f64> = lines[1].split(',').map(|s| s.parse().unwrap()).collect();
        assert_abs_diff_eq!(first[0], dens.cell_center(0), epsilon = 1e-15);
        assert_abs_diff_eq!(first[1], dens.values()[0], epsilon = 1e-15);
    }

    #[test]
    fn grid_density_validates_inputs() {
        assert!(GridDensity::new(1.0, 0.0, vec![1.0]).is_err());
        assert!(GridDensity::new(0.0, 1.0, vec![]).is_err());
        assert!(GridDensity::new(0.0, 1.0, vec![-0.5, 1.0]).is_err());
        assert!(GridDensity::from_gaussian(0.0, 1.0, 4, 0.0, -1.0).is_err());
        let a = GridDensity::uniform(0.0, 1.0, 4).unwrap();
        let b = GridDensity::uniform(0.0, 1.0, 5).unwrap();
        assert!(a.l1_distance(&b).is_err());
    }

    #[test]
    fn moments_match_the_generating_gaussian() {
        let dens = GridDensity::from_gaussian(-8.0, 8.0, 1600, 0.4, 0.7).unwrap();
        assert_abs_diff_eq!(dens.mass(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dens.mean(), 0.4, epsilon = 1e-6);
        assert_abs_diff_eq!(dens.variance(), 0.7, epsilon = 1e-4);
    }
}

//! Exact filters: models whose posterior admits finite-dimensional
//! sufficient statistics.
//!
//! Four families of recursions live here, each as a pure step function
//! mapping (belief, observation increment) to the next belief:
//!
//! - **Discrete-time HMM** ([`hmm_filter_step`]): with row-stochastic
//!   transition matrix `P` and per-state emission row `e(y)`,
//!
//!   ```text
//!   p̂' = diag(e(y)) Pᵀ p̂ / (e(y)ᵀ Pᵀ p̂)
//!   ```
//!
//! - **Discrete-time linear-Gaussian** ([`kalman_discrete_step`]): the
//!   Kalman recursion with predicted covariance `Σ̃ = AΣAᵀ + Σx`, gain
//!   `K = Σ̃Bᵀ(BΣ̃Bᵀ + Σy)⁻¹`, mean `μ' = Aμ + K(y − BAμ)`, covariance
//!   `Σ' = (I − KB)Σ̃`.
//!
//! - **Continuous time, Gaussian observation noise**: the finite-state
//!   posterior ([`wonham_step`], Euler step of
//!   `dp̂_i = (Aᵀp̂)_i dt + p̂_i (h_i − hp̂)ᵀ Σy⁻¹ (dY − hp̂ dt)`, clamped
//!   and renormalized) and the linear-Gaussian posterior
//!   ([`kalman_bucy_step`], Euler step of
//!   `dμ = Aμ dt + ΣBᵀΣy⁻¹(dY − Bμ dt)` and the Riccati flow
//!   `dΣ = (AΣ + ΣAᵀ + Σx − ΣBᵀΣy⁻¹BΣ) dt`).
//!
//! - **Continuous time, point-process observations**: the finite-state
//!   posterior ([`pp_finite_state_step`]) driven by counting increments,
//!   and its two-state log-odds reduction ([`log_odds_step`])
//!
//!   ```text
//!   dα = −2a sinh(α) dt + log(r₊/r₋) (dN¹ − dN²)
//!   ```
//!
//!   for symmetric switching with swapped channel rates.
//!
//! `pp_finite_state_step` advances log-probabilities multiplicatively:
//! `log p_i += ((Aᵀp)_i / p_i) dt − Σ_j h_{ji} dt + Σ_j log(h_{ji}) dN_j`,
//! then renormalizes. For two states this makes the induced log-odds
//! increment algebraically identical to the explicit [`log_odds_step`]
//! Euler update — the two trajectories differ only by accumulated f64
//! roundoff — while an additive Euler scheme would differ at O(dt) per
//! step. States whose probability has reached zero fall back to one
//! additive master-equation injection step, since a multiplicative update
//! cannot move mass into an empty state.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::MarkovChainModel;
use crate::numeric::{clamp_psd, logsumexp};
use crate::rng::{stream, StreamTag};

/// Tolerance for the simplex invariant on [`DiscreteBelief`].
pub const SIMPLEX_TOL: f64 = 1e-10;

/// Below this probability a state is treated as empty by the multiplicative
/// point-process update and receives an additive master-equation injection
/// instead (the ratio `(Aᵀp)_i/p_i` is numerically meaningless there).
const EMPTY_STATE_FLOOR: f64 = 1e-300;

// ---------------------------------------------------------------------------
// Belief types
// ---------------------------------------------------------------------------

/// Posterior over finitely many states: a probability vector kept on the
/// simplex to within [`SIMPLEX_TOL`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteBelief {
    probs: DVector<f64>,
}

impl DiscreteBelief {
    /// Validates and wraps a probability vector.
    pub fn new(probs: DVector<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Shape("belief must have at least one state".into()));
        }
        if let Some(bad) = probs.iter().find(|&&p| !(p >= 0.0)) {
            return Err(Error::Numerical(format!(
                "belief has negative or NaN probability {bad}"
            )));
        }
        let mass: f64 = probs.sum();
        if (mass - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Numerical(format!(
                "belief mass {mass} deviates from 1 by more than {SIMPLEX_TOL:e}"
            )));
        }
        Ok(Self { probs })
    }

    /// Uniform belief over `n` states.
    pub fn uniform(n: usize) -> Self {
        Self {
            probs: DVector::from_element(n, 1.0 / n as f64),
        }
    }

    /// Normalizes a nonnegative weight vector into a belief; errors when
    /// the total mass is zero or non-finite.
    pub fn from_unnormalized(weights: DVector<f64>) -> Result<Self> {
        let mass: f64 = weights.sum();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::ZeroLikelihood(format!(
                "cannot normalize belief with total mass {mass}"
            )));
        }
        Self::new(weights / mass)
    }

    /// Number of states.
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    /// True when the belief has no states (never constructible; for
    /// completeness of the container API).
    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// The probability vector.
    pub fn probs(&self) -> &DVector<f64> {
        &self.probs
    }

    /// `P(X = i)`.
    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// Maximum-a-posteriori state; ties resolve to the lowest index (so a
    /// two-state belief at exactly 1/2 reports state 0).
    pub fn map_state(&self) -> usize {
        let mut best = 0;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Log-odds `log(p_0 / p_1)` of a two-state belief.
    pub fn log_odds(&self) -> Result<f64> {
        if self.probs.len() != 2 {
            return Err(Error::Shape(format!(
                "log-odds needs exactly 2 states, got {}",
                self.probs.len()
            )));
        }
        Ok(self.probs[0].ln() - self.probs[1].ln())
    }
}

/// Gaussian posterior `N(μ, Σ)`. Construction symmetrizes the covariance
/// and clamps eigenvalue roundoff ([`crate::numeric::clamp_psd`]); a
/// covariance with an eigenvalue below `-1e-10` is rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianBelief {
    /// Validates and wraps mean and covariance.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Shape(format!(
                "covariance is {}x{} for mean of dimension {n}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("belief has non-finite entries".into()));
        }
        let (cov, _) = clamp_psd(&cov)?;
        Ok(Self { mean, cov })
    }

    /// Scalar belief.
    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(
            DVector::from_vec(vec![mean]),
            DMatrix::from_element(1, 1, var),
        )
    }

    /// Posterior mean.
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Posterior covariance.
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Mean of a scalar belief.
    pub fn mean1(&self) -> f64 {
        self.mean[0]
    }

    /// Variance of a scalar belief.
    pub fn var1(&self) -> f64 {
        self.cov[(0, 0)]
    }
}

// ---------------------------------------------------------------------------
// Discrete-time models and steps
// ---------------------------------------------------------------------------

/// Discrete-time hidden Markov model with finitely many observation
/// symbols: row-stochastic transition matrix `P` (`P_ij = P(next = j | cur
/// = i)`) and row-stochastic emission matrix `E` (`E_iy = P(symbol = y |
/// state = i)`).
#[derive(Clone, Debug)]
pub struct DiscreteHMMModel {
    transition: DMatrix<f64>,
    emission: DMatrix<f64>,
    initial: DVector<f64>,
}

impl DiscreteHMMModel {
    /// Validates stochasticity of all three ingredients to `1e-12`.
    pub fn new(
        transition: DMatrix<f64>,
        emission: DMatrix<f64>,
        initial: DVector<f64>,
    ) -> Result<Self> {
        let n = transition.nrows();
        if n == 0 || transition.ncols() != n {
            return Err(Error::Model("transition matrix must be square".into()));
        }
        if emission.nrows() != n {
            return Err(Error::Shape(format!(
                "emission matrix has {} rows for {n} states",
                emission.nrows()
            )));
        }
        if initial.len() != n {
            return Err(Error::Shape("initial distribution length mismatch".into()));
        }
        for (name, m) in [("transition", &transition), ("emission", &emission)] {
            for i in 0..m.nrows() {
                let s: f64 = m.row(i).sum();
                if (s - 1.0).abs() > 1e-12 || m.row(i).iter().any(|&v| v < 0.0) {
                    return Err(Error::Model(format!(
                        "{name} row {i} is not a probability distribution (sum {s})"
                    )));
                }
            }
        }
        if (initial.sum() - 1.0).abs() > 1e-12 || initial.iter().any(|&v| v < 0.0) {
            return Err(Error::Model("initial distribution is not on the simplex".into()));
        }
        Ok(Self {
            transition,
            emission,
            initial,
        })
    }

    /// Two-state, two-symbol chain: stays with probability `stay`, and the
    /// emitted symbol equals the state with probability `1 - flip`.
    pub fn binary(stay: f64, flip: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&stay) || !(0.0..=1.0).contains(&flip) {
            return Err(Error::Model(format!(
                "stay and flip must be probabilities, got {stay}, {flip}"
            )));
        }
        Self::new(
            DMatrix::from_row_slice(2, 2, &[stay, 1.0 - stay, 1.0 - stay, stay]),
            DMatrix::from_row_slice(2, 2, &[1.0 - flip, flip, flip, 1.0 - flip]),
            DVector::from_element(2, 0.5),
        )
    }

    /// Number of hidden states.
    pub fn n_states(&self) -> usize {
        self.transition.nrows()
    }

    /// Number of observation symbols.
    pub fn n_symbols(&self) -> usize {
        self.emission.ncols()
    }

    /// Transition matrix `P`.
    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    /// Emission matrix `E`.
    pub fn emission(&self) -> &DMatrix<f64> {
        &self.emission
    }

    /// Initial distribution.
    pub fn initial(&self) -> &DVector<f64> {
        &self.initial
    }

    /// Samples a state path `x_0..x_n` and symbols `y_1..y_n` (symbol `k`
    /// is emitted by state `x_{k+1}`); states and symbols draw from
    /// separate deterministic streams of `seed`.
    pub fn simulate(&self, n_steps: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut state_rng = stream(seed, StreamTag::Signal, 0);
        let mut symbol_rng = stream(seed, StreamTag::SymbolObs, 0);
        let sample_row = |row: &[f64], u: f64| -> usize {
            let mut acc = 0.0;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return j;
                }
            }
            row.len() - 1
        };

        let init: Vec<f64> = self.initial.iter().copied().collect();
        let mut x = sample_row(&init, state_rng.gen());
        let mut states = Vec::with_capacity(n_steps + 1);
        let mut symbols = Vec::with_capacity(n_steps);
        states.push(x);
        for _ in 0..n_steps {
            let trans_row: Vec<f64> = self.transition.row(x).iter().copied().collect();
            x = sample_row(&trans_row, state_rng.gen());
            states.push(x);
            let emit_row: Vec<f64> = self.emission.row(x).iter().copied().collect();
            symbols.push(sample_row(&emit_row, symbol_rng.gen()));
        }
        (states, symbols)
    }
}

/// One HMM filtering update: predict through `Pᵀ`, weight by the emission
/// column of the observed `symbol`, renormalize. Errors with
/// `ZeroLikelihood` when the symbol has zero probability under the
/// predicted belief.
pub fn hmm_filter_step(
    model: &DiscreteHMMModel,
    belief: &DiscreteBelief,
    symbol: usize,
) -> Result<DiscreteBelief> {
    if belief.len() != model.n_states() {
        return Err(Error::Shape("belief/model state count mismatch".into()));
    }
    if symbol >= model.n_symbols() {
        return Err(Error::Config(format!(
            "symbol {symbol} out of range for {} symbols",
            model.n_symbols()
        )));
    }
    let predicted = model.transition.transpose() * belief.probs();
    let weighted = DVector::from_fn(model.n_states(), |i, _| {
        model.emission[(i, symbol)] * predicted[i]
    });
    DiscreteBelief::from_unnormalized(weighted)
}

/// Discrete-time linear-Gaussian model `x' = Ax + ξ`, `y = Bx' + ζ` with
/// `ξ ~ N(0, Σx)`, `ζ ~ N(0, Σy)`.
#[derive(Clone, Debug)]
pub struct DiscreteKalmanModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma_x: DMatrix<f64>,
    pub sigma_y: DMatrix<f64>,
}

impl DiscreteKalmanModel {
    /// Validates dimensions and noise covariances (`Σx` PSD, `Σy` SPD).
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma_x: DMatrix<f64>,
        sigma_y: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || sigma_x.nrows() != n || sigma_x.ncols() != n || b.ncols() != n {
            return Err(Error::Shape("state-space dimension mismatch".into()));
        }
        let l = b.nrows();
        if sigma_y.nrows() != l || sigma_y.ncols() != l {
            return Err(Error::Shape("observation dimension mismatch".into()));
        }
        clamp_psd(&sigma_x)?;
        if nalgebra::Cholesky::new(sigma_y.clone()).is_none() {
            return Err(Error::Model(
                "observation noise covariance must be positive definite".into(),
            ));
        }
        Ok(Self {
            a,
            b,
            sigma_x,
            sigma_y,
        })
    }
}

/// One discrete-time Kalman update (predict + correct) for observation `y`.
pub fn kalman_discrete_step(
    model: &DiscreteKalmanModel,
    belief: &GaussianBelief,
    y: &DVector<f64>,
) -> Result<GaussianBelief> {
    let a = &model.a;
    let b = &model.b;
    let predicted_mean = a * belief.mean();
    let predicted_cov = a * belief.cov() * a.transpose() + &model.sigma_x;

    let s = b * &predicted_cov * b.transpose() + &model.sigma_y;
    let s_inv = s.clone().try_inverse().ok_or_else(|| {
        Error::Numerical("innovation covariance is singular in Kalman update".into())
    })?;
    let gain = &predicted_cov * b.transpose() * s_inv;

    let mean = &predicted_mean + &gain * (y - b * &predicted_mean);
    let eye = DMatrix::identity(a.nrows(), a.nrows());
    let cov = (eye - &gain * b) * predicted_cov;
    GaussianBelief::new(mean, cov)
}

// ---------------------------------------------------------------------------
// Continuous-time steps, Gaussian observation noise
// ---------------------------------------------------------------------------

/// One Euler step of the finite-state posterior under Gaussian-noise
/// observations:
///
/// ```text
/// p̂_i += (Aᵀp̂)_i dt + p̂_i (h_i − hp̂)ᵀ Σy⁻¹ (dY − hp̂ dt)
/// ```
///
/// where column `i` of `obs_table` (l×n) is `h_i`. Euler can push entries
/// slightly negative; they are clamped to zero and the vector renormalized.
pub fn wonham_step(
    chain: &MarkovChainModel,
    obs_table: &DMatrix<f64>,
    noise_inv: &DMatrix<f64>,
    belief: &DiscreteBelief,
    dy: &DVector<f64>,
    dt: f64,
) -> Result<DiscreteBelief> {
    let n = chain.n_states();
    if belief.len() != n || obs_table.ncols() != n {
        return Err(Error::Shape("belief/observation-table state count mismatch".into()));
    }
    let p = belief.probs();
    let drift = chain.master_rhs(p);
    let h_mean = obs_table * p;
    let innovation = dy - &h_mean * dt;
    let weighted_innovation = noise_inv * innovation;

    let mut next = DVector::zeros(n);
    for i in 0..n {
        let mut corr = 0.0;
        for r in 0..obs_table.nrows() {
            corr += (obs_table[(r, i)] - h_mean[r]) * weighted_innovation[r];
        }
        next[i] = (p[i] + drift[i] * dt + p[i] * corr).max(0.0);
    }
    DiscreteBelief::from_unnormalized(next)
}

/// One Euler step of the continuous-time linear-Gaussian posterior
/// (`f(x) = Ax`, `h(x) = Bx`):
///
/// ```text
/// μ += Aμ dt + ΣBᵀΣy⁻¹ (dY − Bμ dt)
/// Σ += (AΣ + ΣAᵀ + Σx − ΣBᵀΣy⁻¹BΣ) dt
/// ```
///
/// The covariance flow is deterministic (a matrix Riccati equation) and
/// independent of the observations.
pub fn kalman_bucy_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    sigma_x: &DMatrix<f64>,
    noise_inv: &DMatrix<f64>,
    belief: &GaussianBelief,
    dy: &DVector<f64>,
    dt: f64,
) -> Result<GaussianBelief> {
    let mu = belief.mean();
    let sigma = belief.cov();
    let gain = sigma * b.transpose() * noise_inv;

    let mean = mu + a * mu * dt + &gain * (dy - b * mu * dt);
    let flow = a * sigma + sigma * a.transpose() + sigma_x - &gain * b * sigma;
    let cov = sigma + flow * dt;
    GaussianBelief::new(mean, cov)
}

// ---------------------------------------------------------------------------
// Continuous-time steps, point-process observations
// ---------------------------------------------------------------------------

/// One step of the finite-state posterior under counting observations,
/// advanced multiplicatively in the log domain:
///
/// ```text
/// log p_i += ((Aᵀp)_i / p_i) dt − Σ_j h_{ji} dt + Σ_j log(h_{ji}) dN_j
/// ```
///
/// followed by log-space renormalization. Entry `(j, i)` of `rate_table`
/// is channel `j`'s rate in state `i`. The scheme agrees with the additive
/// Euler discretization to O(dt) and, for two states, reproduces the
/// [`log_odds_step`] recursion exactly up to f64 roundoff, which is what
/// makes the two implementations comparable at the 1e-6 level over 10⁵
/// steps. A state at zero probability gets one additive master-equation
/// injection `p_i ← (Aᵀp)_i dt` instead (nothing multiplies up from zero).
/// An event on a channel whose rate is zero in every currently-possible
/// state yields a `ZeroLikelihood` error.
pub fn pp_finite_state_step(
    chain: &MarkovChainModel,
    rate_table: &DMatrix<f64>,
    belief: &DiscreteBelief,
    dn: &[u8],
    dt: f64,
) -> Result<DiscreteBelief> {
    let n = chain.n_states();
    let l = rate_table.nrows();
    if belief.len() != n || rate_table.ncols() != n {
        return Err(Error::Shape("belief/rate-table state count mismatch".into()));
    }
    if dn.len() != l {
        return Err(Error::Shape(format!(
            "got {} event indicators for {l} channels",
            dn.len()
        )));
    }

    let p = belief.probs();
    let drift = chain.master_rhs(p);
    let mut log_mass = vec![0.0_f64; n];
    for i in 0..n {
        let mut lm = if p[i] > EMPTY_STATE_FLOOR {
            p[i].ln() + (drift[i] / p[i]) * dt
        } else {
            // Additive injection: the master equation can repopulate an
            // empty state even though the multiplicative form cannot.
            let injected = drift[i].max(0.0) * dt;
            if injected > 0.0 {
                injected.ln()
            } else {
                f64::NEG_INFINITY
            }
        };
        for j in 0..l {
            let rate = rate_table[(j, i)];
            lm -= rate * dt;
            if dn[j] == 1 {
                lm += rate.ln(); // rate = 0 → −inf: state ruled out.
            }
        }
        log_mass[i] = lm;
    }

    let norm = logsumexp(&log_mass);
    if !norm.is_finite() {
        return Err(Error::ZeroLikelihood(
            "event is impossible under every state with posterior mass".into(),
        ));
    }
    let probs = DVector::from_fn(n, |i, _| (log_mass[i] - norm).exp());
    DiscreteBelief::new(probs)
}

/// One Euler step of the two-state log-odds `α = log(p₁/p₂)` for symmetric
/// switching at hazard `a` with swapped channel rates (channel 1 fires at
/// `r₊` in state 1 and `r₋` in state 2; channel 2 the reverse):
///
/// ```text
/// α += −2a sinh(α) dt + log(r₊/r₋) (dN¹ − dN²)
/// ```
///
/// The rate-difference dt-terms of the two channels cancel exactly under
/// this symmetry, so between events the evidence only relaxes toward zero.
pub fn log_odds_step(alpha: f64, a: f64, r_plus: f64, r_minus: f64, dn: [u8; 2], dt: f64) -> f64 {
    alpha - 2.0 * a * alpha.sinh() * dt
        + (r_plus / r_minus).ln() * (f64::from(dn[0]) - f64::from(dn[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MarkovChainModel;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;

    #[test]
    fn discrete_belief_invariants() {
        assert!(DiscreteBelief::new(DVector::from_vec(vec![0.6, 0.5])).is_err());
        assert!(DiscreteBelief::new(DVector::from_vec(vec![1.1, -0.1])).is_err());
        let b = DiscreteBelief::new(DVector::from_vec(vec![0.5, 0.5])).unwrap();
        assert_eq!(b.map_state(), 0); // tie resolves low
        let c = DiscreteBelief::new(DVector::from_vec(vec![0.4, 0.6])).unwrap();
        assert_eq!(c.map_state(), 1);
    }

    #[test]
    fn gaussian_belief_repairs_roundoff_only() {
        let near = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-12]);
        let b = GaussianBelief::new(DVector::zeros(2), near).unwrap();
        assert!(b.cov()[(0, 0)] >= 0.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        assert!(GaussianBelief::new(DVector::zeros(2), bad).is_err());
    }

    #[test]
    fn hmm_step_hand_computed() {
        // Sticky chain, 80%-reliable symbols, uniform belief, observe 0:
        // predict = (0.5, 0.5); weights = (0.4, 0.1) → (0.8, 0.2).
        let model = DiscreteHMMModel::binary(0.9, 0.2).unwrap();
        let b = hmm_filter_step(&model, &DiscreteBelief::uniform(2), 0).unwrap();
        assert_abs_diff_eq!(b.prob(0), 0.8, epsilon = 1e-14);
        assert_abs_diff_eq!(b.prob(1), 0.2, epsilon = 1e-14);
    }

    #[test]
    fn hmm_zero_likelihood_symbol_errors() {
        // Emission puts zero mass on symbol 1 in both states.
        let model = DiscreteHMMModel::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
            DVector::from_element(2, 0.5),
        )
        .unwrap();
        let err = hmm_filter_step(&model, &DiscreteBelief::uniform(2), 1).unwrap_err();
        assert!(matches!(err, Error::ZeroLikelihood(_)));
    }

    #[test]
    fn hmm_simulation_is_reproducible_and_consistent() {
        let model = DiscreteHMMModel::binary(0.9, 0.2).unwrap();
        let (states, symbols) = model.simulate(2_000, 5);
        assert_eq!(states.len(), 2_001);
        assert_eq!(symbols.len(), 2_000);
        assert_eq!(model.simulate(2_000, 5), (states.clone(), symbols.clone()));
        // Symbol should match its emitting state about 80% of the time.
        let agree = symbols
            .iter()
            .zip(states.iter().skip(1))
            .filter(|(y, x)| y == x)
            .count() as f64
            / 2_000.0;
        assert!((agree - 0.8).abs() < 0.05, "agreement {agree}");
    }

    /// Brute-force Bayes on a fine grid as an oracle for the scalar Kalman
    /// update: posterior ∝ N(x'; Aμ, AΣAᵀ+Σx) · N(y; Bx', Σy).
    #[test]
    fn kalman_discrete_step_matches_grid_bayes() {
        let model = DiscreteKalmanModel::new(
            DMatrix::from_element(1, 1, 0.9),
            DMatrix::from_element(1, 1, 1.3),
            DMatrix::from_element(1, 1, 0.4),
            DMatrix::from_element(1, 1, 0.6),
        )
        .unwrap();
        let prior = GaussianBelief::scalar(0.7, 0.5).unwrap();
        let y = DVector::from_vec(vec![1.9]);
        let post = kalman_discrete_step(&model, &prior, &y).unwrap();

        let (a, b, sx, sy) = (0.9, 1.3, 0.4, 0.6);
        let pred_mean = a * 0.7;
        let pred_var = a * a * 0.5 + sx;
        let n = 400_000;
        let (lo, hi) = (pred_mean - 10.0, pred_mean + 10.0);
        let dx = (hi - lo) / n as f64;
        let mut mass = 0.0;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..n {
            let x = lo + (i as f64 + 0.5) * dx;
            let w = (-(x - pred_mean) * (x - pred_mean) / (2.0 * pred_var)).exp()
                * (-(1.9 - b * x) * (1.9 - b * x) / (2.0 * sy)).exp();
            mass += w;
            m1 += w * x;
            m2 += w * x * x;
        }
        let mean = m1 / mass;
        let var = m2 / mass - mean * mean;
        assert_relative_eq!(post.mean1(), mean, max_relative = 1e-8);
        assert_relative_eq!(post.var1(), var, max_relative = 1e-6);
    }

    #[test]
    fn wonham_with_uninformative_obs_follows_master_equation() {
        // All states emit the same drift → correction vanishes and the
        // belief solves ṗ = Aᵀp: p₀(t) = 1/2 + (p₀(0) − 1/2)e^{−2at}.
        let chain = MarkovChainModel::two_state_symmetric(0.8).unwrap();
        let table = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let noise_inv = DMatrix::from_element(1, 1, 1.0 / 0.5);
        let dt = 1e-4;
        let mut belief = DiscreteBelief::new(DVector::from_vec(vec![0.9, 0.1])).unwrap();
        let mut rng = stream(77, StreamTag::Scratch, 0);
        for _ in 0..10_000 {
            // Observation noise only (any dY works: the correction is 0).
            let dy = DVector::from_vec(vec![
                1.0 * dt + (0.5_f64 * dt).sqrt() * rng.gen::<f64>().mul_add(2.0, -1.0),
            ]);
            belief = wonham_step(&chain, &table, &noise_inv, &belief, &dy, dt).unwrap();
        }
        let expect = 0.5 + 0.4 * (-2.0_f64 * 0.8 * 1.0).exp();
        assert_abs_diff_eq!(belief.prob(0), expect, epsilon = 1e-3);
    }

    #[test]
    fn wonham_moves_mass_toward_observed_state() {
        let chain = MarkovChainModel::two_state_symmetric(0.1).unwrap();
        let table = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let noise_inv = DMatrix::from_element(1, 1, 10.0);
        let dt = 1e-3;
        let mut belief = DiscreteBelief::uniform(2);
        for _ in 0..2_000 {
            // Noise-free observations of state 0's drift.
            let dy = DVector::from_vec(vec![1.0 * dt]);
            belief = wonham_step(&chain, &table, &noise_inv, &belief, &dy, dt).unwrap();
        }
        assert!(belief.prob(0) > 0.95, "p0 = {}", belief.prob(0));
        assert_abs_diff_eq!(belief.probs().sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kalman_bucy_riccati_approaches_fixed_point() {
        // A = −1, B = 1, Σx = Σy = 1: stationary variance solves
        // −2Σ + 1 − Σ² = 0 → Σ = √2 − 1.
        let a = DMatrix::from_element(1, 1, -1.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let sx = DMatrix::from_element(1, 1, 1.0);
        let ny = DMatrix::from_element(1, 1, 1.0);
        let dt = 1e-3;
        let mut belief = GaussianBelief::scalar(0.0, 1.0).unwrap();
        for _ in 0..8_000 {
            let dy = DVector::from_vec(vec![0.0]);
            belief = kalman_bucy_step(&a, &b, &sx, &ny, &belief, &dy, dt).unwrap();
        }
        assert_abs_diff_eq!(belief.var1(), 2.0_f64.sqrt() - 1.0, epsilon = 1e-3);
    }

    #[test]
    fn pp_finite_state_tracks_master_equation_without_information() {
        // Equal rates in both states: events carry no information, so the
        // posterior follows the prior master equation.
        let chain = MarkovChainModel::two_state_symmetric(0.8).unwrap();
        let table = DMatrix::from_row_slice(1, 2, &[3.0, 3.0]);
        let dt = 1e-4;
        let mut belief = DiscreteBelief::new(DVector::from_vec(vec![0.9, 0.1])).unwrap();
        let mut rng = stream(13, StreamTag::Scratch, 0);
        for _ in 0..10_000 {
            let dn = [u8::from(rng.gen::<f64>() < 3.0 * dt)];
            belief = pp_finite_state_step(&chain, &table, &belief, &dn, dt).unwrap();
        }
        let expect = 0.5 + 0.4 * (-2.0_f64 * 0.8 * 1.0).exp();
        assert_abs_diff_eq!(belief.prob(0), expect, epsilon = 1e-3);
    }

    #[test]
    fn pp_finite_state_repopulates_empty_state() {
        let chain = MarkovChainModel::two_state_symmetric(0.5).unwrap();
        let table = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let belief = DiscreteBelief::new(DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let next = pp_finite_state_step(&chain, &table, &belief, &[0], 1e-3).unwrap();
        // Master equation injects a·dt of mass into the empty state.
        assert_relative_eq!(next.prob(1), 0.5e-3, max_relative = 1e-2);
    }

    #[test]
    fn pp_event_with_zero_rate_pins_posterior() {
        // Channel fires only in state 0; an event must pin the belief there.
        let chain = MarkovChainModel::two_state_symmetric(0.5).unwrap();
        let table = DMatrix::from_row_slice(1, 2, &[10.0, 0.0]);
        let belief = DiscreteBelief::uniform(2);
        let next = pp_finite_state_step(&chain, &table, &belief, &[1], 1e-3).unwrap();
        assert_abs_diff_eq!(next.prob(0), 1.0, epsilon = 1e-12);

        // And if no state can produce the event, that is a zero-likelihood
        // failure, not a silent NaN.
        let dead = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert!(matches!(
            pp_finite_state_step(&chain, &dead, &belief, &[1], 1e-3),
            Err(Error::ZeroLikelihood(_))
        ));
    }

    #[test]
    fn log_odds_matches_finite_state_filter() {
        // Symmetric click paradigm: the explicit log-odds recursion and the
        // two-state point-process filter are the same algorithm in
        // different coordinates; over 2·10⁴ steps they agree to roundoff.
        let (a, r_plus, r_minus, dt) = (1.0, 38.0, 2.0, 5e-4);
        let chain = MarkovChainModel::two_state_symmetric(a).unwrap();
        let table = DMatrix::from_row_slice(2, 2, &[r_plus, r_minus, r_minus, r_plus]);

        let mut rng = stream(99, StreamTag::Scratch, 0);
        let mut belief = DiscreteBelief::uniform(2);
        let mut alpha = 0.0;
        let mut max_gap: f64 = 0.0;
        for _ in 0..20_000 {
            // Feed both filters identical (state-independent) event noise;
            // agreement must hold pathwise for any event sequence.
            let dn = [
                u8::from(rng.gen::<f64>() < 10.0 * dt),
                u8::from(rng.gen::<f64>() < 10.0 * dt),
            ];
            belief = pp_finite_state_step(&chain, &table, &belief, &dn, dt).unwrap();
            alpha = log_odds_step(alpha, a, r_plus, r_minus, dn, dt);
            max_gap = max_gap.max((belief.log_odds().unwrap() - alpha).abs());
        }
        assert!(max_gap < 1e-9, "max log-odds gap {max_gap:e}");
    }

    #[test]
    fn log_odds_relaxes_to_zero_without_clicks() {
        let mut alpha = 3.0;
        for _ in 0..100_000 {
            alpha = log_odds_step(alpha, 1.0, 30.0, 1.0, [0, 0], 1e-4);
        }
        assert!(alpha.abs() < 1e-3, "alpha {alpha}");
    }
}

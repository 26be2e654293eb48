//! Registered scalar model families, nameable from configuration by string
//! key plus numeric parameters.
//!
//! Each family carries its exact derivatives and, where the integrals exist
//! in closed form, its Gaussian moment closures: expectations of the family
//! function (and its products with `x`, `x²`) under `N(μ, Σ)`. The moment
//! closures feed the assumed-density filter's analytic path and serve as the
//! ground truth that the quadrature path is tested against.
//!
//! Families and their keys:
//!
//! | kind  | key             | parameters        | function                      |
//! |-------|-----------------|-------------------|-------------------------------|
//! | drift | `linear`        | `a`               | `f(x) = a·x`                  |
//! | drift | `double_well`   | `a`               | `f(x) = −a·x·(x² − 1)`        |
//! | rate  | `constant`      | `c`               | `h(x) = c`                    |
//! | rate  | `linear`        | `c`, `b`          | `h(x) = c + b·x`              |
//! | rate  | `exponential`   | `c`, `beta`       | `h(x) = c·exp(β·x)`           |
//! | rate  | `gaussian_bump` | `g0`, `s0`, `m0`  | `h(x) = g0·exp(−(x−m0)²/2s0²)`|
//! | obs   | `linear`        | `b`               | `h(x) = b·x`                  |
//!
//! The double-well drift with `a = 4` has stationary density proportional to
//! `exp(−(x⁴ − 2x²))` when the process noise intensity is 2; its modes sit
//! at ±1, making it the standard bimodal stress test for Gaussian
//! approximations.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Looks up a required parameter in a config-supplied map.
fn param(params: &BTreeMap<String, f64>, key: &str, family: &str) -> Result<f64> {
    params.get(key).copied().ok_or_else(|| {
        Error::Config(format!(
            "family '{family}' requires parameter '{key}' (got: {:?})",
            params.keys().collect::<Vec<_>>()
        ))
    })
}

/// Rejects parameters the family does not define (catches config typos).
fn no_extras(params: &BTreeMap<String, f64>, allowed: &[&str], family: &str) -> Result<()> {
    for k in params.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(Error::Config(format!(
                "family '{family}' does not take parameter '{k}' (allowed: {allowed:?})"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Drift families
// ---------------------------------------------------------------------------

/// Registered scalar drift families.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DriftFamily {
    /// `f(x) = a·x` (stable for `a < 0`).
    Linear { a: f64 },
    /// `f(x) = −a·x·(x² − 1)`: gradient flow of the double-well potential
    /// `a(x⁴/4 − x²/2)`, pushing mass toward the wells at ±1.
    DoubleWell { a: f64 },
}

impl DriftFamily {
    /// Resolves a config key + parameter map.
    pub fn from_config(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        match name {
            "linear" => {
                no_extras(params, &["a"], name)?;
                Ok(Self::Linear {
                    a: param(params, "a", name)?,
                })
            }
            "double_well" => {
                no_extras(params, &["a"], name)?;
                Ok(Self::DoubleWell {
                    a: param(params, "a", name)?,
                })
            }
            other => Err(Error::Config(format!(
                "unknown drift family '{other}' (available: linear, double_well)"
            ))),
        }
    }

    /// Config key for this family.
    pub fn key(&self) -> &'static str {
        match self {
            Self::Linear { .. } => "linear",
            Self::DoubleWell { .. } => "double_well",
        }
    }

    /// `f(x)`.
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Self::Linear { a } => a * x,
            Self::DoubleWell { a } => -a * x * (x * x - 1.0),
        }
    }

    /// `f'(x)`.
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Self::Linear { a } => a,
            Self::DoubleWell { a } => -a * (3.0 * x * x - 1.0),
        }
    }

    /// `E[f(X)]` under `X ~ N(μ, Σ)`.
    ///
    /// For the double well this uses `E[X³] = μ³ + 3μΣ`.
    pub fn gaussian_mean(&self, mu: f64, sigma: f64) -> f64 {
        match *self {
            Self::Linear { a } => a * mu,
            Self::DoubleWell { a } => -a * (mu.powi(3) + 3.0 * mu * sigma - mu),
        }
    }

    /// `cov(f(X), X)` under `X ~ N(μ, Σ)`.
    ///
    /// For the double well this uses `cov(X³, X) = 3Σ(μ² + Σ)`.
    pub fn gaussian_cross_cov(&self, mu: f64, sigma: f64) -> f64 {
        match *self {
            Self::Linear { a } => a * sigma,
            Self::DoubleWell { a } => -a * sigma * (3.0 * mu * mu + 3.0 * sigma - 1.0),
        }
    }
}

// ---------------------------------------------------------------------------
// Rate families (point-process channels)
// ---------------------------------------------------------------------------

/// Registered scalar rate families for point-process observation channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RateFamily {
    /// `h(x) = c`: state-independent rate (carries no information).
    Constant { c: f64 },
    /// `h(x) = c + b·x`. Positivity on the state's support is the
    /// configuration's responsibility; the simulator rejects negative rates.
    Linear { c: f64, b: f64 },
    /// `h(x) = c·exp(β·x)`: log-linear tuning curve.
    Exponential { c: f64, beta: f64 },
    /// `h(x) = g0·exp(−(x − m0)²/(2·s0²))`: localized receptive field
    /// centered at `m0` with width `s0` and peak rate `g0`.
    GaussianBump { g0: f64, s0: f64, m0: f64 },
}

impl RateFamily {
    /// Resolves a config key + parameter map, validating positivity where
    /// the family requires it.
    pub fn from_config(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let fam = match name {
            "constant" => {
                no_extras(params, &["c"], name)?;
                Self::Constant {
                    c: param(params, "c", name)?,
                }
            }
            "linear" => {
                no_extras(params, &["c", "b"], name)?;
                Self::Linear {
                    c: param(params, "c", name)?,
                    b: param(params, "b", name)?,
                }
            }
            "exponential" => {
                no_extras(params, &["c", "beta"], name)?;
                Self::Exponential {
                    c: param(params, "c", name)?,
                    beta: param(params, "beta", name)?,
                }
            }
            "gaussian_bump" => {
                no_extras(params, &["g0", "s0", "m0"], name)?;
                Self::GaussianBump {
                    g0: param(params, "g0", name)?,
                    s0: param(params, "s0", name)?,
                    m0: param(params, "m0", name)?,
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown rate family '{other}' (available: constant, linear, exponential, \
                     gaussian_bump)"
                )))
            }
        };
        fam.validate()?;
        Ok(fam)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Self::Constant { c } => {
                if c < 0.0 {
                    return Err(Error::Config(format!("constant rate must be ≥ 0, got {c}")));
                }
            }
            Self::Linear { .. } => {}
            Self::Exponential { c, .. } => {
                if !(c > 0.0) {
                    return Err(Error::Config(format!(
                        "exponential rate scale must be positive, got {c}"
                    )));
                }
            }
            Self::GaussianBump { g0, s0, .. } => {
                if !(g0 > 0.0) || !(s0 > 0.0) {
                    return Err(Error::Config(format!(
                        "gaussian_bump requires g0 > 0 and s0 > 0, got g0 = {g0}, s0 = {s0}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Config key for this family.
    pub fn key(&self) -> &'static str {
        match self {
            Self::Constant { .. } => "constant",
            Self::Linear { .. } => "linear",
            Self::Exponential { .. } => "exponential",
            Self::GaussianBump { .. } => "gaussian_bump",
        }
    }

    /// `h(x)`.
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Self::Constant { c } => c,
            Self::Linear { c, b } => c + b * x,
            Self::Exponential { c, beta } => c * (beta * x).exp(),
            Self::GaussianBump { g0, s0, m0 } => {
                let z = (x - m0) / s0;
                g0 * (-0.5 * z * z).exp()
            }
        }
    }

    /// `h'(x)`.
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Self::Constant { .. } => 0.0,
            Self::Linear { b, .. } => b,
            Self::Exponential { beta, .. } => beta * self.eval(x),
            Self::GaussianBump { s0, m0, .. } => -(x - m0) / (s0 * s0) * self.eval(x),
        }
    }

    /// `h''(x)`.
    pub fn second_derivative(&self, x: f64) -> f64 {
        match *self {
            Self::Constant { .. } | Self::Linear { .. } => 0.0,
            Self::Exponential { beta, .. } => beta * beta * self.eval(x),
            Self::GaussianBump { s0, m0, .. } => {
                let s2 = s0 * s0;
                let d = x - m0;
                (d * d / (s2 * s2) - 1.0 / s2) * self.eval(x)
            }
        }
    }

    /// `(log h)'(x)`. Infinite where `h` vanishes (linear family at its
    /// root); callers on the linearization path must keep the state inside
    /// the positive region.
    pub fn log_derivative(&self, x: f64) -> f64 {
        match *self {
            Self::Constant { .. } => 0.0,
            Self::Linear { c, b } => b / (c + b * x),
            Self::Exponential { beta, .. } => beta,
            Self::GaussianBump { s0, m0, .. } => -(x - m0) / (s0 * s0),
        }
    }

    /// `(log h)''(x)`. Identically zero for the exponential family — the
    /// case that sends no jump correction to the variance in the
    /// point-process linearization filter.
    pub fn log_second_derivative(&self, x: f64) -> f64 {
        match *self {
            Self::Constant { .. } => 0.0,
            Self::Linear { c, b } => {
                let h = c + b * x;
                -(b * b) / (h * h)
            }
            Self::Exponential { .. } => 0.0,
            Self::GaussianBump { s0, .. } => -1.0 / (s0 * s0),
        }
    }

    /// Closed-form `(E[h], E[hX], E[hX²])` under `X ~ N(μ, Σ)`, when the
    /// family admits one:
    ///
    /// - constant/linear: polynomial moments;
    /// - exponential: `E[h] = c·exp(βμ + β²Σ/2)`, and the tilted law is
    ///   `N(μ + βΣ, Σ)`;
    /// - gaussian bump: product-of-Gaussians — with
    ///   `Σ* = (1/Σ + 1/s0²)⁻¹` and `μ* = Σ*(μ/Σ + m0/s0²)`,
    ///   `E[h] = g0·s0/√(Σ + s0²)·exp(−(μ−m0)²/(2(Σ+s0²)))`,
    ///   `E[hX] = E[h]·μ*`, `E[hX²] = E[h]·(Σ* + μ*²)`.
    pub fn gaussian_moments(&self, mu: f64, sigma: f64) -> (f64, f64, f64) {
        match *self {
            Self::Constant { c } => (c, c * mu, c * (mu * mu + sigma)),
            Self::Linear { c, b } => {
                let m1 = mu;
                let m2 = mu * mu + sigma;
                let m3 = mu.powi(3) + 3.0 * mu * sigma;
                (c + b * m1, c * m1 + b * m2, c * m2 + b * m3)
            }
            Self::Exponential { c, beta } => {
                let mean_h = c * (beta * mu + 0.5 * beta * beta * sigma).exp();
                let tilted_mu = mu + beta * sigma;
                (
                    mean_h,
                    mean_h * tilted_mu,
                    mean_h * (tilted_mu * tilted_mu + sigma),
                )
            }
            Self::GaussianBump { g0, s0, m0 } => {
                let s_total = sigma + s0 * s0;
                let mean_h =
                    g0 * s0 / s_total.sqrt() * (-(mu - m0) * (mu - m0) / (2.0 * s_total)).exp();
                let sigma_star = 1.0 / (1.0 / sigma + 1.0 / (s0 * s0));
                let mu_star = sigma_star * (mu / sigma + m0 / (s0 * s0));
                (
                    mean_h,
                    mean_h * mu_star,
                    mean_h * (sigma_star + mu_star * mu_star),
                )
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gaussian-observation families
// ---------------------------------------------------------------------------

/// Registered scalar observation families for Gaussian-noise channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObsFamily {
    /// `h(x) = b·x`.
    Linear { b: f64 },
}

impl ObsFamily {
    /// Resolves a config key + parameter map.
    pub fn from_config(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        match name {
            "linear" => {
                no_extras(params, &["b"], name)?;
                Ok(Self::Linear {
                    b: param(params, "b", name)?,
                })
            }
            other => Err(Error::Config(format!(
                "unknown observation family '{other}' (available: linear)"
            ))),
        }
    }

    /// `h(x)`.
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Self::Linear { b } => b * x,
        }
    }

    /// `h'(x)`.
    pub fn derivative(&self, _x: f64) -> f64 {
        match *self {
            Self::Linear { b } => b,
        }
    }

    /// `(E[h], cov(h, X))` under `X ~ N(μ, Σ)`.
    pub fn gaussian_moments(&self, mu: f64, sigma: f64) -> (f64, f64) {
        match *self {
            Self::Linear { b } => (b * mu, b * sigma),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Dense midpoint quadrature of `g(x)·N(x; μ, Σ)` over ±10 std.
    fn gauss_quad(g: impl Fn(f64) -> f64, mu: f64, sigma: f64) -> f64 {
        let sd = sigma.sqrt();
        let (lo, hi) = (mu - 10.0 * sd, mu + 10.0 * sd);
        let n = 200_000;
        let dx = (hi - lo) / n as f64;
        let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
        (0..n)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * dx;
                let w = norm * (-(x - mu) * (x - mu) / (2.0 * sigma)).exp();
                g(x) * w * dx
            })
            .sum()
    }

    #[test]
    fn config_lookup_round_trips() {
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), 4.0);
        let fam = DriftFamily::from_config("double_well", &p).unwrap();
        assert_eq!(fam, DriftFamily::DoubleWell { a: 4.0 });
        assert_eq!(fam.key(), "double_well");

        assert!(DriftFamily::from_config("cubic", &p).is_err());
        p.insert("junk".to_string(), 1.0);
        assert!(DriftFamily::from_config("double_well", &p).is_err());
    }

    #[test]
    fn rate_family_rejects_bad_params() {
        let mut p = BTreeMap::new();
        p.insert("g0".to_string(), 10.0);
        p.insert("s0".to_string(), -0.1);
        p.insert("m0".to_string(), 0.0);
        assert!(RateFamily::from_config("gaussian_bump", &p).is_err());

        let mut p = BTreeMap::new();
        p.insert("c".to_string(), -1.0);
        assert!(RateFamily::from_config("constant", &p).is_err());
    }

    #[test]
    fn double_well_drift_values() {
        let f = DriftFamily::DoubleWell { a: 4.0 };
        // Zeros at the well bottoms and the barrier top.
        assert_eq!(f.eval(0.0), 0.0);
        assert_eq!(f.eval(1.0), 0.0);
        assert_eq!(f.eval(-1.0), 0.0);
        // Restoring toward the nearest well.
        assert!(f.eval(0.5) > 0.0);
        assert!(f.eval(1.5) < 0.0);
        assert_eq!(f.derivative(0.0), 4.0);
        assert_eq!(f.derivative(1.0), -8.0);
    }

    #[test]
    fn drift_gaussian_moments_match_quadrature() {
        for fam in [
            DriftFamily::Linear { a: -0.8 },
            DriftFamily::DoubleWell { a: 4.0 },
        ] {
            for &(mu, sigma) in &[(0.0, 1.0), (0.7, 0.25), (-1.3, 2.0)] {
                let mean = gauss_quad(|x| fam.eval(x), mu, sigma);
                let cross = gauss_quad(|x| fam.eval(x) * x, mu, sigma) - mean * mu;
                assert_relative_eq!(
                    fam.gaussian_mean(mu, sigma),
                    mean,
                    max_relative = 1e-6,
                    epsilon = 1e-10
                );
                assert_relative_eq!(
                    fam.gaussian_cross_cov(mu, sigma),
                    cross,
                    max_relative = 1e-5,
                    epsilon = 1e-8
                );
            }
        }
    }

    #[test]
    fn rate_gaussian_moments_match_quadrature() {
        let families = [
            RateFamily::Constant { c: 3.0 },
            RateFamily::Linear { c: 5.0, b: 0.5 },
            RateFamily::Exponential { c: 2.0, beta: 0.9 },
            RateFamily::GaussianBump {
                g0: 50.0,
                s0: 0.3,
                m0: 1.0,
            },
        ];
        for fam in families {
            for &(mu, sigma) in &[(0.0, 1.0), (0.8, 0.2), (-0.5, 0.6)] {
                let (m0, m1, m2) = fam.gaussian_moments(mu, sigma);
                let q0 = gauss_quad(|x| fam.eval(x), mu, sigma);
                let q1 = gauss_quad(|x| fam.eval(x) * x, mu, sigma);
                let q2 = gauss_quad(|x| fam.eval(x) * x * x, mu, sigma);
                assert_relative_eq!(m0, q0, max_relative = 1e-6, epsilon = 1e-10);
                assert_relative_eq!(m1, q1, max_relative = 1e-6, epsilon = 1e-10);
                assert_relative_eq!(m2, q2, max_relative = 1e-6, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn exponential_rate_log_curvature_vanishes() {
        let fam = RateFamily::Exponential { c: 2.0, beta: 0.9 };
        for &x in &[-2.0, 0.0, 1.5] {
            assert_eq!(fam.log_second_derivative(x), 0.0);
            assert_relative_eq!(fam.log_derivative(x), 0.9);
        }
    }

    #[test]
    fn log_derivatives_match_finite_differences() {
        let families = [
            RateFamily::Linear { c: 5.0, b: 0.5 },
            RateFamily::Exponential { c: 2.0, beta: 0.9 },
            RateFamily::GaussianBump {
                g0: 50.0,
                s0: 0.3,
                m0: 1.0,
            },
        ];
        let h = 1e-5;
        for fam in families {
            for &x in &[-0.8, 0.1, 1.4] {
                let ld_fd = (fam.eval(x + h).ln() - fam.eval(x - h).ln()) / (2.0 * h);
                let lsd_fd =
                    (fam.eval(x + h).ln() - 2.0 * fam.eval(x).ln() + fam.eval(x - h).ln())
                        / (h * h);
                let sd_fd = (fam.eval(x + h) - 2.0 * fam.eval(x) + fam.eval(x - h)) / (h * h);
                assert_relative_eq!(fam.log_derivative(x), ld_fd, max_relative = 1e-6);
                assert_relative_eq!(
                    fam.second_derivative(x),
                    sd_fd,
                    max_relative = 1e-3,
                    epsilon = 1e-4
                );
                assert_relative_eq!(
                    fam.log_second_derivative(x),
                    lsd_fd,
                    max_relative = 1e-3,
                    epsilon = 1e-4
                );
            }
        }
    }
}

//! Coefficients `(μ, σ, ℓ, g)` of the path-dependent equation, sampled
//! hypothesis checks, and the admissibility constants that decide which
//! results of the theory apply.

use std::fmt;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bv_driver::BVDriver;
use crate::error::{Error, Result};

/// Signature of user-supplied coefficient closures: `(t, x₁, x₂) ↦ value`.
pub type CustomFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// A scalar function of time and the reduced state `(x₁, x₂)`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum StateFn {
    Constant { value: f64 },
    /// `clamp(c0 + c1 x₁ + c2 x₂, lo, hi)`.
    Affine {
        c0: f64,
        c1: f64,
        #[serde(default)]
        c2: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lo: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hi: Option<f64>,
    },
    /// `base + amplitude · sin(frequency · x₁ + phase)`.
    Sine {
        base: f64,
        amplitude: f64,
        #[serde(default = "unit")]
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `exp(min(scale · x_component, cap))`.
    ExpCapped {
        component: usize,
        cap: f64,
        #[serde(default = "unit")]
        scale: f64,
    },
    /// `coefficient · exp(rate · |x|)`.
    ExpNorm {
        rate: f64,
        #[serde(default = "unit")]
        coefficient: f64,
    },
    #[serde(skip)]
    Custom(CustomFn),
}

fn unit() -> f64 {
    1.0
}

impl fmt::Debug for StateFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant { value } => write!(f, "Constant({value})"),
            Self::Affine { c0, c1, c2, lo, hi } => write!(f, "Affine({c0} + {c1}·x1 + {c2}·x2, {lo:?}..{hi:?})"),
            Self::Sine { base, amplitude, frequency, phase } => {
                write!(f, "Sine({base} + {amplitude}·sin({frequency}·x1 + {phase}))")
            }
            Self::ExpCapped { component, cap, scale } => write!(f, "ExpCapped(exp(min({scale}·x{component}, {cap})))"),
            Self::ExpNorm { rate, coefficient } => write!(f, "ExpNorm({coefficient}·exp({rate}|x|))"),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl PartialEq for StateFn {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Self::Custom(a), Self::Custom(b)) => Arc::ptr_eq(a, b),
            (Self::Custom(_), _) | (_, Self::Custom(_)) => false,
            _ => format!("{self:?}") == format!("{other:?}"),
        }
    }
}

impl StateFn {
    pub fn constant(value: f64) -> Self {
        Self::Constant { value }
    }

    /// `c0 + c1 x₁ + c2 x₂` without clipping.
    pub fn linear(c0: f64, c1: f64, c2: f64) -> Self {
        Self::Affine { c0, c1, c2, lo: None, hi: None }
    }

    pub fn sine(base: f64, amplitude: f64) -> Self {
        Self::Sine { base, amplitude, frequency: 1.0, phase: 0.0 }
    }

    pub fn custom(f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::Custom(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, t: f64, x: [f64; 2]) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Affine { c0, c1, c2, lo, hi } => {
                let v = c0 + c1 * x[0] + c2 * x[1];
                v.clamp(lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY))
            }
            Self::Sine { base, amplitude, frequency, phase } => base + amplitude * (frequency * x[0] + phase).sin(),
            Self::ExpCapped { component, cap, scale } => {
                let c = if *component == 2 { x[1] } else { x[0] };
                (scale * c).min(*cap).exp()
            }
            Self::ExpNorm { rate, coefficient } => coefficient * (rate * x[0].hypot(x[1])).exp(),
            Self::Custom(f) => f(t, x[0], x[1]),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Constant { value } if *value == 0.0)
    }

    /// Range `[lo, hi]` of a builtin, when it is bounded.
    fn range(&self) -> Option<(f64, f64)> {
        match self {
            Self::Constant { value } => Some((*value, *value)),
            Self::Affine { c0, c1, c2, lo, hi } => {
                if *c1 == 0.0 && *c2 == 0.0 {
                    let v = c0.clamp(lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY));
                    Some((v, v))
                } else {
                    Some(((*lo)?, (*hi)?))
                }
            }
            Self::Sine { base, amplitude, .. } => Some((base - amplitude.abs(), base + amplitude.abs())),
            _ => None,
        }
    }
}

/// Drift bound and ellipticity window for `σ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub mu_bar: f64,
    pub a_low: f64,
    pub a_high: f64,
}

/// Declared Hölder exponents and constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderConstants {
    pub alpha: f64,
    pub alpha_ell: f64,
    pub c_sigma: f64,
    pub c_mu: f64,
    pub c_ell_g: f64,
}

impl Default for HolderConstants {
    fn default() -> Self {
        Self { alpha: 0.5, alpha_ell: 0.5, c_sigma: 1.0, c_mu: 1.0, c_ell_g: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    pub mu: StateFn,
    pub sigma: StateFn,
    pub ell: StateFn,
    pub g: StateFn,
    pub bounds: Bounds,
    pub holder: HolderConstants,
}

impl CoefficientField {
    /// Builds a field from builtin coefficient families, inferring the drift
    /// bound and the ellipticity window from their parameters.
    pub fn new(mu: StateFn, sigma: StateFn, ell: StateFn, g: StateFn, holder: HolderConstants) -> Result<Self> {
        let mu_bar = mu.range().map(|(lo, hi)| lo.abs().max(hi.abs())).unwrap_or(f64::INFINITY);
        let (slo, shi) = sigma.range().ok_or_else(|| {
            Error::InvalidParameter("σ bounds cannot be inferred; use CoefficientField::with_bounds".into())
        })?;
        let (a_low, a_high) = if slo > 0.0 {
            (slo * slo, shi * shi)
        } else if shi < 0.0 {
            (shi * shi, slo * slo)
        } else {
            return Err(Error::InvalidParameter(format!("σ range [{slo}, {shi}] touches zero; not elliptic")));
        };
        Self::with_bounds(mu, sigma, ell, g, Bounds { mu_bar, a_low, a_high }, holder)
    }

    pub fn with_bounds(
        mu: StateFn,
        sigma: StateFn,
        ell: StateFn,
        g: StateFn,
        bounds: Bounds,
        holder: HolderConstants,
    ) -> Result<Self> {
        if !(bounds.a_low > 0.0 && bounds.a_low <= bounds.a_high && bounds.a_high.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < a_low ≤ a_high < ∞, got [{}, {}]",
                bounds.a_low, bounds.a_high
            )));
        }
        if !(holder.alpha > 0.0 && holder.alpha_ell > 0.0) {
            return Err(Error::InvalidParameter("Hölder exponents α and α_ℓ must be positive".into()));
        }
        Ok(Self { mu, sigma, ell, g, bounds, holder })
    }

    /// `μ ≡ 0`, `σ ≡ 1`, `ℓ ≡ 0` and terminal payoff `g`.
    pub fn kolmogorov(g: StateFn) -> Self {
        Self::new(StateFn::constant(0.0), StateFn::constant(1.0), StateFn::constant(0.0), g, HolderConstants::default())
            .expect("constant unit volatility is elliptic")
    }

    pub fn with_payoff(&self, ell: StateFn, g: StateFn) -> Self {
        Self { ell, g, ..self.clone() }
    }

    #[inline]
    pub fn mu(&self, t: f64, x: [f64; 2]) -> f64 {
        self.mu.eval(t, x)
    }

    #[inline]
    pub fn sigma(&self, t: f64, x: [f64; 2]) -> f64 {
        self.sigma.eval(t, x)
    }

    #[inline]
    pub fn sigma2(&self, t: f64, x: [f64; 2]) -> f64 {
        let s = self.sigma.eval(t, x);
        s * s
    }

    #[inline]
    pub fn ell(&self, t: f64, x: [f64; 2]) -> f64 {
        self.ell.eval(t, x)
    }

    #[inline]
    pub fn g(&self, x: [f64; 2]) -> f64 {
        self.g.eval(0.0, x)
    }

    /// True when the frozen kernel is exact: zero drift and a constant
    /// volatility, so that the one-step correction vanishes identically.
    pub fn has_exact_parametrix(&self) -> bool {
        self.mu.is_zero() && matches!(self.sigma, StateFn::Constant { .. })
    }
}

/// Derived exponents and theorem flags.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub beta: [f64; 5],
    pub beta1_prime: f64,
    pub beta2_prime: f64,
    pub kappa0: f64,
    pub kappa1: f64,
    pub delta_beta_hat: f64,
    pub alpha_hat_phi: f64,
    /// Open interval `(0, upper)` for `α_Φ`; empty when `upper ≤ 0`.
    pub alpha_phi_interval: (f64, f64),
    pub alpha_phi: f64,
    pub kappa_phi: f64,
    pub kappa_ell: f64,
    /// `κ₀ > 0`: the series and the density are well defined.
    pub density_defined: bool,
    /// `κ₀ > 0` and `κ₁ > 0`: `∂_{x₁} f` exists with its bound.
    pub first_derivative: bool,
    /// Conditions for `C^{1,2}` regularity and the equation to hold.
    pub classical_solution: bool,
    /// Monotone driver and `0 < lhs < rhs` with the two sides below.
    pub uniqueness_condition: bool,
    pub uniqueness_lhs: f64,
    pub uniqueness_rhs: f64,
    pub not_checkable: Vec<String>,
}

/// Computes every admissibility constant from the driver exponents and the
/// declared Hölder exponents.
pub fn compute_admissibility(field: &CoefficientField, driver: &BVDriver) -> Result<AdmissibilityReport> {
    let beta = driver
        .exponents()
        .ok_or_else(|| Error::Admissibility("driver has no declared or estimated exponents".into()))?;
    admissibility_from(beta, field.holder.alpha, field.holder.alpha_ell, driver.is_monotone())
}

/// Same as [`compute_admissibility`] from raw inputs.
pub fn admissibility_from(beta: [f64; 5], alpha: f64, alpha_ell: f64, monotone: bool) -> Result<AdmissibilityReport> {
    let [b0, b1, b2, b3, b4] = beta;
    let beta1_prime = b1 - b0;
    let beta2_prime = b2 - b0;
    if beta1_prime <= -1.0 || beta2_prime <= -1.0 {
        return Err(Error::Admissibility(format!(
            "β′₁ = {beta1_prime} and β′₂ = {beta2_prime} must both exceed -1"
        )));
    }
    let kappa0 = ((1.0 - b0) / 2.0).min(alpha - b0);
    let kappa1 = kappa0 + (1.0 - b0) / 2.0;
    let delta_beta_hat = (b0 - b1).max(b3 - b2);
    let alpha_hat_phi = 0.5 - b0 - delta_beta_hat / 2.0 - (b0 + 1.0 - 2.0 * alpha).max(0.0) / 2.0;
    let upper = kappa0
        .min(alpha_hat_phi)
        .min((1.0 + beta1_prime) / 2.0)
        .min((1.0 + beta2_prime) / 2.0);
    let alpha_phi = 0.5 * upper;
    let factor = ((2.0 * b4 + 1.0 + beta1_prime) / (1.0 + beta2_prime)).min(1.0);
    let kappa_phi = factor * alpha_phi.min(alpha) - b0;
    let kappa_ell = factor * alpha_ell.min(alpha) - b0;
    let joint = factor * alpha_phi.min(alpha_ell).min(alpha) - b0;
    let uniqueness_lhs = (1.0 + b2 - b0) / (2.0 + 4.0 * b4);
    let uniqueness_rhs = 1.0 - (b3 - b2 + b0) / 2.0;
    Ok(AdmissibilityReport {
        beta,
        beta1_prime,
        beta2_prime,
        kappa0,
        kappa1,
        delta_beta_hat,
        alpha_hat_phi,
        alpha_phi_interval: (0.0, upper),
        alpha_phi,
        kappa_phi,
        kappa_ell,
        density_defined: kappa0 > 0.0,
        first_derivative: kappa0 > 0.0 && kappa1 > 0.0,
        classical_solution: kappa0 > 0.0 && kappa1 > 0.0 && upper > 0.0 && joint > 0.0,
        uniqueness_condition: monotone && 0.0 < uniqueness_lhs && uniqueness_lhs < uniqueness_rhs,
        uniqueness_lhs,
        uniqueness_rhs,
        not_checkable: vec!["functional Lipschitz condition on the value function".to_string()],
    })
}

/// Sampling options for [`probe_hypotheses_with`].
#[derive(Debug, Clone, Copy)]
pub struct ProbeOptions {
    pub center: [f64; 2],
    pub spread: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { center: [0.0, 0.0], spread: 3.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeCheck {
    pub name: String,
    pub declared_constant: f64,
    /// Largest observed ratio `lhs / (rhs without the constant)`.
    pub worst_ratio: f64,
    /// `(s, x₁, x₂, t, y₁, y₂)` at the worst ratio.
    pub witness: [f64; 6],
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub samples: usize,
    pub checks: Vec<ProbeCheck>,
    pub not_checkable: Vec<String>,
}

impl HypothesisReport {
    pub fn passes(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&ProbeCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub fn probe_hypotheses(field: &CoefficientField, driver: &BVDriver, sample_count: usize) -> Result<HypothesisReport> {
    probe_hypotheses_with(field, driver, sample_count, ProbeOptions::default())
}

/// Monte Carlo probe of ellipticity, drift bound, the Hölder conditions on
/// `σ`, `μ`, `ℓ` and the growth bound on `ℓ`, `g`.
pub fn probe_hypotheses_with(
    field: &CoefficientField,
    driver: &BVDriver,
    sample_count: usize,
    opts: ProbeOptions,
) -> Result<HypothesisReport> {
    let beta = driver.exponents().unwrap_or([0.0, 0.0, 2.0, 2.0, 1.0]);
    let b1p = beta[1] - beta[0];
    let b2p = beta[2] - beta[0];
    let h = &field.holder;
    let e1 = 2.0 * h.alpha / (1.0 + b1p);
    let e2 = 2.0 * h.alpha / (1.0 + b2p);
    let l1 = 2.0 * h.alpha_ell / (1.0 + b1p);
    let l2 = 2.0 * h.alpha_ell / (1.0 + b2p);
    let horizon = driver.horizon();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let names = ["ellipticity", "drift_bound", "sigma_holder", "mu_holder", "growth", "ell_holder"];
    let declared = [1.0, 1.0, h.c_sigma, h.c_mu, 1.0, h.c_ell_g];
    let mut worst = [0.0f64; 6];
    let mut witness = [[0.0; 6]; 6];
    let mut record = |i: usize, ratio: f64, pt: [f64; 6]| {
        if ratio > worst[i] || ratio.is_nan() {
            worst[i] = if ratio.is_nan() { f64::INFINITY } else { ratio };
            witness[i] = pt;
        }
    };
    for _ in 0..sample_count {
        let width = horizon * 10f64.powf(-4.0 * rng.random::<f64>());
        let s = (horizon - width) * rng.random::<f64>();
        let t = s + width;
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let x = [opts.center[0] + opts.spread * draw(), opts.center[1] + opts.spread * draw()];
        let y = [opts.center[0] + opts.spread * draw(), opts.center[1] + opts.spread * draw()];
        let pt = [s, x[0], x[1], t, y[0], y[1]];

        let a = field.sigma2(s, x);
        let ell_ratio = if a < field.bounds.a_low {
            field.bounds.a_low / a
        } else {
            a / field.bounds.a_high
        };
        record(0, ell_ratio, pt);
        let m = field.mu(s, x).abs();
        record(1, if m == 0.0 { 0.0 } else { m / field.bounds.mu_bar }, pt);

        let inc = driver.increment(s, t);
        let w = [x[0] - y[0], x[1] - (y[1] - inc * y[0])];
        let wn = w[0].hypot(w[1]);
        let den = width.powf(h.alpha) + wn.powf(e1) + wn.powf(e2);
        record(2, (field.sigma(s, x) - field.sigma(t, y)).abs() / den, pt);

        let den_mu = (x[0] - y[0]).abs().powf(e1) + (x[1] - y[1]).abs().powf(e2);
        if den_mu > 0.0 {
            record(3, (field.mu(t, x) - field.mu(t, y)).abs() / den_mu, pt);
        }

        let c = h.c_ell_g;
        let xn = x[0].hypot(x[1]);
        let growth = (field.ell(s, x).abs() + field.g(x).abs()) / (c * (c * xn).exp());
        record(4, growth, pt);

        let yn = y[0].hypot(y[1]);
        let den_ell = ((c * xn).exp() + (c * yn).exp()) * ((x[0] - y[0]).abs().powf(l1) + (x[1] - y[1]).abs().powf(l2));
        if den_ell > 0.0 {
            record(5, (field.ell(s, x) - field.ell(s, y)).abs() / den_ell, pt);
        }
    }
    let checks = (0..6)
        .map(|i| ProbeCheck {
            name: names[i].to_string(),
            declared_constant: declared[i],
            worst_ratio: worst[i],
            witness: witness[i],
            pass: worst[i] <= declared[i] * 1.01,
        })
        .collect();
    Ok(HypothesisReport {
        samples: sample_count,
        checks,
        not_checkable: vec!["functional Lipschitz condition on the value function".to_string()],
    })
}

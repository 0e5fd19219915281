//! Deterministic continuous drivers of bounded variation.
//!
//! The running integral `I_t = ∫_0^t x(r) dA_r` of the state against the
//! driver `A` is what makes the equation path dependent. Everything the
//! kernel layer needs from `A` over a window `[s, t]` is packed into a
//! [`MomentTriple`]:
//!
//! ```text
//! Ā      = (t-s)^{-1} ∫_s^t A_r dr
//! m̃_{s,t} = (t-s)^{-1} ∫_s^t (A_r - A_s)^2 dr
//! m_{s,t}  = (t-s)^{-1} ∫_s^t (A_r - Ā)^2 dr  =  m̃ - (Ā - A_s)^2
//! ```
//!
//! `m` is integrated directly in centered form rather than through the
//! difference `m̃ - (Ā - A_s)^2`, which loses all precision on short windows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::GridPath;
use crate::quad::{adaptive_simpson, tanh_sinh};

/// The four families of drivers supported out of the box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DriverKind {
    /// `A_t = ∫_0^t ρ(r) dr`, with `ρ` piecewise linear through `density`
    /// sampled on a uniform grid of `[0, T]`. A single value is a constant rate.
    AbsolutelyContinuous { density: Vec<f64> },
    /// `A_t = scale · t^γ`.
    Power {
        gamma: f64,
        #[serde(default = "unit")]
        scale: f64,
    },
    /// Declared Hölder pair `(γ₁, γ₂, C₁, C₂)`; see [`BVDriver::holder_pair`]
    /// for the path that realizes it.
    HolderPair { gamma1: f64, gamma2: f64, c1: f64, c2: f64 },
    /// Piecewise-linear interpolation of `(times, values)`.
    Tabulated { times: Vec<f64>, values: Vec<f64> },
}

fn unit() -> f64 {
    1.0
}

/// Window statistics of the driver over `[s, t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentTriple {
    /// Mean of `A` over the window.
    pub a_bar: f64,
    /// Centered second moment `m_{s,t}`.
    pub m: f64,
    /// Second moment about `A_s`, `m̃_{s,t}`.
    pub m_tilde: f64,
    /// `Ā - A_s`, i.e. `(t-s)^{-1} ∫ (A_r - A_s) dr`.
    pub offset: f64,
    /// `A_t - A_s`.
    pub increment: f64,
    /// `t - s`.
    pub tau: f64,
}

/// Point estimates of `β₀..β₄` with slope standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ExponentEstimate {
    pub beta: [f64; 5],
    pub stderr: [f64; 5],
    /// `exp(intercept)` of each envelope regression.
    pub envelope_constants: [f64; 5],
    /// Largest absolute log-residual of each envelope regression.
    pub max_residual: [f64; 5],
    pub widths: usize,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BVDriver {
    kind: DriverKind,
    horizon: f64,
    resolution: usize,
    exponents: Option<[f64; 5]>,
    monotone: bool,
    cumulative: Vec<f64>,
}

impl BVDriver {
    pub fn new(kind: DriverKind, horizon: f64, resolution: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        let mut cumulative = Vec::new();
        let (monotone, exponents) = match &kind {
            DriverKind::AbsolutelyContinuous { density } => {
                if density.is_empty() || density.iter().any(|r| !r.is_finite()) {
                    return Err(Error::InvalidParameter("density table must be non-empty and finite".into()));
                }
                if density.len() > 1 {
                    let h = horizon / (density.len() - 1) as f64;
                    cumulative.push(0.0);
                    for w in density.windows(2) {
                        let last = *cumulative.last().unwrap();
                        cumulative.push(last + 0.5 * h * (w[0] + w[1]));
                    }
                }
                let lo = density.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = density.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let monotone = lo >= 0.0 || hi <= 0.0;
                let declared = (lo > 0.0 || hi < 0.0).then_some([0.0, 0.0, 2.0, 2.0, 1.0]);
                (monotone, declared)
            }
            DriverKind::Power { gamma, scale } => {
                if !(*gamma > 0.0 && *gamma <= 1.0) || !scale.is_finite() || *scale == 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "power driver needs 0 < γ ≤ 1 and a nonzero scale, got γ = {gamma}, scale = {scale}"
                    )));
                }
                let g = *gamma;
                (true, Some([0.0, 0.0, 2.0 * g, 2.0 * g, g]))
            }
            DriverKind::HolderPair { gamma1, gamma2, c1, c2 } => {
                let (g1, g2) = (*gamma1, *gamma2);
                if !(g2 > 0.0 && g2 <= g1 && g1 <= 1.0) || !(*c1 > 0.0) || !(*c2 >= 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "holder pair needs 0 < γ₂ ≤ γ₁ ≤ 1, C₁ > 0, C₂ ≥ 0; got ({g1}, {g2}, {c1}, {c2})"
                    )));
                }
                (true, Some([2.0 * (g1 - g2), 0.0, 2.0 * g2, 2.0 * g1, g2]))
            }
            DriverKind::Tabulated { times, values } => {
                if times.len() < 2 || times.len() != values.len() {
                    return Err(Error::InvalidParameter("tabulated driver needs ≥ 2 matching knots".into()));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::InvalidParameter("tabulated knot times must increase strictly".into()));
                }
                if times[0] > 0.0 || *times.last().unwrap() < horizon {
                    return Err(Error::InvalidParameter("tabulated knots must cover [0, T]".into()));
                }
                let up = values.windows(2).all(|w| w[1] >= w[0]);
                let down = values.windows(2).all(|w| w[1] <= w[0]);
                (up || down, None)
            }
        };
        Ok(Self { kind, horizon, resolution: resolution.max(2), exponents, monotone, cumulative })
    }

    /// `A_t = rate · t`.
    pub fn linear(rate: f64, horizon: f64) -> Result<Self> {
        Self::new(DriverKind::AbsolutelyContinuous { density: vec![rate] }, horizon, 1024)
    }

    /// `A_t = t^γ`.
    pub fn power(gamma: f64, horizon: f64) -> Result<Self> {
        Self::new(DriverKind::Power { gamma, scale: 1.0 }, horizon, 1024)
    }

    /// Driver declared through a Hölder pair `(γ₁, γ₂, C₁, C₂)`.
    ///
    /// A monotone path with `A_t - A_s ≥ C₁ |t-s|^{γ₁}` on every window and
    /// `γ₁ < 1` does not exist, so the declared constants are kept as
    /// metadata (they fix the exponent table) and the path is realized as
    /// `A_t = C₁ t + C₂ sgn(t - T/2) |t - T/2|^{γ₂}`: linear growth plus a
    /// single cusp of order `γ₂` at mid-horizon. With `γ₁ = γ₂ = 1` this is
    /// a linear driver.
    pub fn holder_pair(gamma1: f64, gamma2: f64, c1: f64, c2: f64, horizon: f64) -> Result<Self> {
        Self::new(DriverKind::HolderPair { gamma1, gamma2, c1, c2 }, horizon, 1024)
    }

    pub fn kind(&self) -> &DriverKind {
        &self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn is_monotone(&self) -> bool {
        self.monotone
    }

    /// Declared (or previously estimated) exponents `β₀..β₄`.
    pub fn exponents(&self) -> Option<[f64; 5]> {
        self.exponents
    }

    /// Stores exponents after checking the ordering `β₁ ≤ β₀ ≤ β₃`,
    /// `β₁ ≤ β₂ ≤ β₃`.
    pub fn with_exponents(mut self, beta: [f64; 5]) -> Result<Self> {
        let [b0, b1, b2, b3, _] = beta;
        let slack = 1e-12;
        if !(b1 <= b0 + slack && b0 <= b3 + slack && b1 <= b2 + slack && b2 <= b3 + slack) {
            return Err(Error::InvalidParameter(format!(
                "exponents {beta:?} violate β₁ ≤ β₀ ≤ β₃ and β₁ ≤ β₂ ≤ β₃"
            )));
        }
        if beta.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::InvalidParameter(format!("exponents must be finite and ≥ 0, got {beta:?}")));
        }
        self.exponents = Some(beta);
        Ok(self)
    }

    /// Keeps declared exponents; otherwise estimates them on the default
    /// windows, clipping regression noise below zero.
    pub fn ensure_exponents(self) -> Result<Self> {
        if self.exponents.is_some() {
            return Ok(self);
        }
        let est = self.estimate_exponents(&self.default_windows(8, 4))?;
        let beta = est.beta.map(|b| b.max(0.0));
        self.with_exponents(beta)
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        let eps = 1e-12 * self.horizon;
        if !(t >= -eps && t <= self.horizon + eps) {
            return Err(Error::TimeOutOfRange { t, horizon: self.horizon });
        }
        Ok(t.clamp(0.0, self.horizon))
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(self.value(t))
    }

    /// `A(t)` without range checks; `t` is clamped to `[0, T]`.
    pub fn value(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.horizon);
        match &self.kind {
            DriverKind::AbsolutelyContinuous { density } => {
                if density.len() == 1 {
                    density[0] * t
                } else {
                    self.density_integral(0.0, t)
                }
            }
            DriverKind::Power { gamma, scale } => scale * t.powf(*gamma),
            DriverKind::HolderPair { gamma2, c1, c2, .. } => {
                let u = t - 0.5 * self.horizon;
                c1 * t + c2 * u.signum() * u.abs().powf(*gamma2)
            }
            DriverKind::Tabulated { times, values } => {
                let k = segment(times, t);
                let w = (t - times[k]) / (times[k + 1] - times[k]);
                values[k] + w * (values[k + 1] - values[k])
            }
        }
    }

    /// `A_t - A_s`, computed without cancellation for short windows.
    pub fn increment(&self, s: f64, t: f64) -> f64 {
        if t == s {
            return 0.0;
        }
        if t < s {
            return -self.increment(t, s);
        }
        match &self.kind {
            DriverKind::AbsolutelyContinuous { density } => {
                if density.len() == 1 {
                    density[0] * (t - s)
                } else {
                    self.density_integral(s, t)
                }
            }
            DriverKind::Power { gamma, scale } => scale * pow_diff(s, t, *gamma),
            DriverKind::HolderPair { gamma2, c1, c2, .. } => {
                let c = 0.5 * self.horizon;
                let (a, b) = (s - c, t - c);
                let cusp = if a >= 0.0 {
                    pow_diff(a, b, *gamma2)
                } else if b <= 0.0 {
                    pow_diff(-b, -a, *gamma2)
                } else {
                    b.powf(*gamma2) + (-a).powf(*gamma2)
                };
                c1 * (t - s) + c2 * cusp
            }
            DriverKind::Tabulated { times, values } => {
                let ks = segment(times, s);
                let kt = segment(times, t);
                let slope = |k: usize| (values[k + 1] - values[k]) / (times[k + 1] - times[k]);
                if ks == kt {
                    slope(ks) * (t - s)
                } else {
                    let mut acc = slope(ks) * (times[ks + 1] - s);
                    for k in ks + 1..kt {
                        acc += values[k + 1] - values[k];
                    }
                    acc + slope(kt) * (t - times[kt])
                }
            }
        }
    }

    fn density_integral(&self, s: f64, t: f64) -> f64 {
        let DriverKind::AbsolutelyContinuous { density } = &self.kind else { unreachable!() };
        let n = density.len();
        let h = self.horizon / (n - 1) as f64;
        let rho = |r: f64| {
            let k = ((r / h).floor() as usize).min(n - 2);
            let w = (r - k as f64 * h) / h;
            density[k] + w * (density[k + 1] - density[k])
        };
        let ks = ((s / h).floor() as usize).min(n - 2);
        let kt = ((t / h).floor() as usize).min(n - 2);
        if ks == kt {
            return 0.5 * (t - s) * (rho(s) + rho(t));
        }
        let right = (ks + 1) as f64 * h;
        let left = kt as f64 * h;
        0.5 * (right - s) * (rho(s) + density[ks + 1])
            + (self.cumulative[kt] - self.cumulative[ks + 1])
            + 0.5 * (t - left) * (density[kt] + rho(t))
    }

    /// Total variation of `A` over `[0, T]`.
    pub fn total_variation(&self) -> f64 {
        if self.monotone {
            return self.increment(0.0, self.horizon).abs();
        }
        let n = self.resolution * 16;
        let h = self.horizon / n as f64;
        (0..n).map(|i| self.increment(i as f64 * h, (i + 1) as f64 * h).abs()).sum()
    }

    /// Interior points where the driver is not smooth.
    fn breakpoints(&self, s: f64, t: f64) -> Vec<f64> {
        let mut pts = vec![s];
        match &self.kind {
            DriverKind::AbsolutelyContinuous { density } if density.len() > 1 => {
                let h = self.horizon / (density.len() - 1) as f64;
                let first = (s / h).floor() as usize + 1;
                let mut k = first;
                while (k as f64) * h < t {
                    pts.push(k as f64 * h);
                    k += 1;
                }
            }
            DriverKind::HolderPair { .. } => {
                let c = 0.5 * self.horizon;
                if s < c && c < t {
                    pts.push(c);
                }
            }
            DriverKind::Tabulated { times, .. } => {
                pts.extend(times.iter().copied().filter(|&r| r > s && r < t));
            }
            _ => {}
        }
        pts.push(t);
        pts
    }

    /// Moment functionals of the driver over `[s, t]`.
    pub fn moments(&self, s: f64, t: f64) -> Result<MomentTriple> {
        if !(t > s) {
            return Err(Error::EmptyWindow { s, t });
        }
        let s = self.check_time(s)?;
        let t = self.check_time(t)?;
        let tau = t - s;
        if tau < 1e-12 * self.horizon {
            return Err(Error::WindowTooShort { s, t });
        }
        let a_s = self.value(s);
        let increment = self.increment(s, t);
        let closed = match &self.kind {
            DriverKind::AbsolutelyContinuous { density } if density.len() == 1 => {
                let rho = density[0];
                Some((0.5 * rho * tau, rho * rho * tau * tau / 12.0, rho * rho * tau * tau / 3.0))
            }
            DriverKind::Power { gamma, scale } if s == 0.0 => {
                let g = *gamma;
                let offset = scale * tau.powf(g) / (g + 1.0);
                let m_tilde = scale * scale * tau.powf(2.0 * g) / (2.0 * g + 1.0);
                Some((offset, centered_power_m(g) * scale * scale * tau.powf(2.0 * g), m_tilde))
            }
            _ => None,
        };
        let (offset, m, m_tilde) = match closed {
            Some(v) => v,
            None => self.integrate_moments(s, t, increment),
        };
        Ok(MomentTriple { a_bar: a_s + offset, m, m_tilde, offset, increment, tau })
    }

    fn integrate_moments(&self, s: f64, t: f64, increment: f64) -> (f64, f64, f64) {
        let tau = t - s;
        let pts = self.breakpoints(s, t);
        let phi = |r: f64| self.increment(s, r);
        let scale = increment.abs().max(1e-300);
        // pieces meeting the cusp of a holder-pair driver carry an endpoint
        // singularity in the derivative; tanh-sinh handles it, Simpson does not
        let cusp = matches!(self.kind, DriverKind::HolderPair { .. });
        let integrate = |f: &dyn Fn(f64) -> f64, a: f64, b: f64, abs: f64| {
            if cusp {
                tanh_sinh(f, a, b, 6)
            } else {
                adaptive_simpson(&f, a, b, abs, 1e-14)
            }
        };
        let mut j1 = 0.0;
        let mut j2 = 0.0;
        for w in pts.windows(2) {
            j1 += integrate(&phi, w[0], w[1], 1e-16 * tau * scale);
            j2 += integrate(&|r| phi(r).powi(2), w[0], w[1], 1e-16 * tau * scale * scale);
        }
        let offset = j1 / tau;
        let mut jc = 0.0;
        for w in pts.windows(2) {
            jc += integrate(&|r| (phi(r) - offset).powi(2), w[0], w[1], 1e-17 * tau * scale * scale);
        }
        (offset, jc / tau, j2 / tau)
    }

    /// Geometric ladder of window widths `T·2^{-k}`, `k = 1..=levels`, each
    /// placed at `shifts + 1` evenly spread left endpoints.
    pub fn default_windows(&self, levels: usize, shifts: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for k in 1..=levels {
            let tau = self.horizon * 2f64.powi(-(k as i32));
            for j in 0..=shifts {
                let s = (self.horizon - tau) * j as f64 / shifts.max(1) as f64;
                out.push((s, s + tau));
            }
        }
        out
    }

    /// Log-log envelope regressions over a window set.
    ///
    /// Windows are grouped by width; per width the extremes of `m̃/m`,
    /// `1/m` and `|ΔA|` are taken and their logarithms regressed on
    /// `log(t-s)`. Upper envelopes give `β₀`, `β₃`, `β₄`; lower envelopes give
    /// `β₁`, `β₂`.
    pub fn estimate_exponents(&self, windows: &[(f64, f64)]) -> Result<ExponentEstimate> {
        let mut groups: Vec<(f64, [f64; 5])> = Vec::new();
        for &(s, t) in windows {
            if !(t > s) {
                return Err(Error::EmptyWindow { s, t });
            }
            let mo = self.moments(s, t)?;
            if !(mo.m > 0.0) {
                return Err(Error::DegenerateWindow { s, t, m: mo.m });
            }
            let ratio = mo.m_tilde / mo.m;
            let inv = 1.0 / mo.m;
            let inc = mo.increment.abs();
            let key = mo.tau.ln();
            match groups.iter_mut().find(|g| (g.0 - key).abs() < 1e-9) {
                Some((_, e)) => {
                    e[0] = e[0].max(ratio);
                    e[1] = e[1].min(ratio);
                    e[2] = e[2].min(inv);
                    e[3] = e[3].max(inv);
                    e[4] = e[4].max(inc);
                }
                None => groups.push((key, [ratio, ratio, inv, inv, inc])),
            }
        }
        if groups.len() < 2 {
            return Err(Error::DegenerateRegression);
        }
        let x: Vec<f64> = groups.iter().map(|g| g.0).collect();
        let mut beta = [0.0; 5];
        let mut stderr = [0.0; 5];
        let mut envelope_constants = [0.0; 5];
        let mut max_residual = [0.0; 5];
        for i in 0..5 {
            let y: Vec<f64> = groups.iter().map(|g| g.1[i].max(1e-300).ln()).collect();
            let fit = least_squares(&x, &y);
            beta[i] = if i == 4 { fit.slope } else { -fit.slope };
            stderr[i] = fit.slope_stderr;
            envelope_constants[i] = fit.intercept.exp();
            max_residual[i] = fit.max_residual;
        }
        Ok(ExponentEstimate { beta, stderr, envelope_constants, max_residual, widths: groups.len(), windows: windows.len() })
    }
}

fn centered_power_m(g: f64) -> f64 {
    1.0 / (2.0 * g + 1.0) - 1.0 / ((g + 1.0) * (g + 1.0))
}

/// Index `k` of the segment `[times[k], times[k+1]]` containing `t`.
fn segment(times: &[f64], t: f64) -> usize {
    let k = times.partition_point(|&x| x <= t);
    k.saturating_sub(1).min(times.len() - 2)
}

/// `b^γ - a^γ` for `0 ≤ a ≤ b`, accurate when `b - a ≪ a`.
fn pow_diff(a: f64, b: f64, gamma: f64) -> f64 {
    if a <= 0.0 {
        b.powf(gamma)
    } else {
        a.powf(gamma) * (gamma * ((b - a) / a).ln_1p()).exp_m1()
    }
}

pub(crate) struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub max_residual: f64,
}

pub(crate) fn least_squares(x: &[f64], y: &[f64]) -> Fit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let resid: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - intercept - slope * a).collect();
    let sse: f64 = resid.iter().map(|r| r * r).sum();
    let dof = (x.len() as f64 - 2.0).max(1.0);
    let slope_stderr = (sse / dof / sxx).sqrt();
    let max_residual = resid.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Fit { slope, intercept, slope_stderr, max_residual }
}

impl BVDriver {
    /// Riemann-Stieltjes integral `∫_s^t x(r) dA_r` of a step path, exact
    /// for the step interpolation: `Σ x(τᵢ)(A(τᵢ₊₁) - A(τᵢ))` over the grid
    /// points of the path inside `[s, t]`.
    pub fn stieltjes_integral(&self, path: &GridPath, s: f64, t: f64) -> Result<f64> {
        if !(t > s) {
            return Err(Error::EmptyWindow { s, t });
        }
        self.check_time(s)?;
        self.check_time(t)?;
        let slack = 1e-12 * self.horizon;
        if path.start() > s + slack || path.end() < t - slack {
            return Err(Error::PathCoverage { start: path.start(), end: path.end(), s, t });
        }
        let mut acc = 0.0;
        let mut left = s;
        for &knot in path.times().iter().filter(|&&r| r > s && r < t) {
            acc += path.value_at(left) * self.increment(left, knot);
            left = knot;
        }
        acc += path.value_at(left) * self.increment(left, t);
        Ok(acc)
    }
}

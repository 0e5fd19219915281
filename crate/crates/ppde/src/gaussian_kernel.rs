//! Frozen-coefficient Gaussian kernels of the degenerate pair `(X, I)`.
//!
//! Freezing the volatility at a scalar variance `a`, the pair started at
//! `x` at time `s` is Gaussian at time `t` with mean `E⁻¹_{s,t}(x)` and a
//! covariance that is easiest to write for the offset
//! `w = x - E_{s,t}(y)`, `E_{s,t}(y) = (y₁, y₂ - (A_t - A_s) y₁)`:
//!
//! ```text
//! Σ_{s,t}(a) = a [ t-s            -∫(A_r-A_s)dr   ]
//!                [ -∫(A_r-A_s)dr   ∫(A_r-A_s)²dr   ]
//!
//! det Σ = a² (t-s)² m_{s,t}
//! Σ⁻¹  = 1/(a (t-s) m_{s,t}) [ m̃_{s,t}   Ā-A_s ]
//!                             [ Ā-A_s     1     ]
//! ```
//!
//! Densities are evaluated in log space since `det Σ` vanishes like
//! `(t-s)² m_{s,t}`. Derivatives in `x` are polynomials in `p = Σ⁻¹w` times
//! the density.

use serde::Serialize;

use crate::bv_driver::{BVDriver, MomentTriple};
use crate::coefficient_field::CoefficientField;
use crate::error::{Error, Result};

pub type State = [f64; 2];

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Symmetric 2×2 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    #[inline]
    pub fn apply(&self, v: State) -> State {
        [self.xx * v[0] + self.xy * v[1], self.xy * v[0] + self.yy * v[1]]
    }

    #[inline]
    pub fn quad(&self, v: State) -> f64 {
        self.xx * v[0] * v[0] + 2.0 * self.xy * v[0] * v[1] + self.yy * v[1] * v[1]
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { xx: c * self.xx, xy: c * self.xy, yy: c * self.yy }
    }

    /// Generic 2×2 inverse by the adjugate formula.
    pub fn inverse(&self) -> Self {
        let d = self.det();
        Self { xx: self.yy / d, xy: -self.xy / d, yy: self.xx / d }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self { xx: self.xx + o.xx, xy: self.xy + o.xy, yy: self.yy + o.yy }
    }

    /// Lower Cholesky factor `L` with `L Lᵀ = self`, as `(l11, l21, l22)`.
    pub fn cholesky(&self) -> [f64; 3] {
        let l11 = self.xx.sqrt();
        let l21 = self.xy / l11;
        let l22 = (self.yy - l21 * l21).max(0.0).sqrt();
        [l11, l21, l22]
    }
}

/// Driver-only part of a frozen kernel on `[s, t]`: everything at unit
/// variance. A frame at variance `a` rescales `Σ` by `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowGeometry {
    pub s: f64,
    pub t: f64,
    pub tau: f64,
    pub increment: f64,
    pub offset: f64,
    pub m: f64,
    pub m_tilde: f64,
    /// `Σ_{s,t}(1)`.
    pub sigma1: Sym2,
    /// Closed-form `Σ_{s,t}(1)⁻¹`.
    pub inv1: Sym2,
    /// `log det Σ_{s,t}(1) = 2 log(t-s) + log m_{s,t}`.
    pub log_det1: f64,
}

impl WindowGeometry {
    pub fn new(driver: &BVDriver, s: f64, t: f64) -> Result<Self> {
        let mo = driver.moments(s, t)?;
        Self::from_moments(s, t, &mo)
    }

    pub fn from_moments(s: f64, t: f64, mo: &MomentTriple) -> Result<Self> {
        if !(mo.m > 1e-30) {
            return Err(Error::DegenerateWindow { s, t, m: mo.m });
        }
        let tau = mo.tau;
        let sigma1 = Sym2 { xx: tau, xy: -tau * mo.offset, yy: tau * mo.m_tilde };
        let c = 1.0 / (tau * mo.m);
        let inv1 = Sym2 { xx: c * mo.m_tilde, xy: c * mo.offset, yy: c };
        Ok(Self {
            s,
            t,
            tau,
            increment: mo.increment,
            offset: mo.offset,
            m: mo.m,
            m_tilde: mo.m_tilde,
            sigma1,
            inv1,
            log_det1: 2.0 * tau.ln() + mo.m.ln(),
        })
    }

    /// `E_{s,t}(y) = (y₁, y₂ - (A_t - A_s) y₁)`.
    #[inline]
    pub fn e_map(&self, y: State) -> State {
        [y[0], y[1] - self.increment * y[0]]
    }

    /// `E⁻¹_{s,t}(x) = (x₁, x₂ + (A_t - A_s) x₁)`.
    #[inline]
    pub fn e_inv(&self, x: State) -> State {
        [x[0], x[1] + self.increment * x[0]]
    }

    /// `w_{s,t}(x, y) = x - E_{s,t}(y)`.
    #[inline]
    pub fn offset_w(&self, x: State, y: State) -> State {
        [x[0] - y[0], x[1] - (y[1] - self.increment * y[0])]
    }

    #[inline]
    pub fn log_density_w(&self, a: f64, w: State) -> f64 {
        -0.5 * self.inv1.quad(w) / a - 0.5 * self.log_det1 - a.ln() - LN_2PI
    }

    #[inline]
    pub fn density_w(&self, a: f64, w: State) -> f64 {
        self.log_density_w(a, w).exp()
    }

    #[inline]
    pub fn derivatives_w(&self, a: f64, w: State) -> KernelDerivatives {
        let f = self.density_w(a, w);
        let inv = self.inv1.scale(1.0 / a);
        KernelDerivatives::from_parts(f, inv.apply(w), inv)
    }

    pub fn frame(&self, a: f64) -> KernelFrame {
        KernelFrame::from_geometry(*self, a, None)
    }
}

/// A frozen kernel: window geometry plus a variance and, optionally, the
/// freeze point it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelFrame {
    pub geometry: WindowGeometry,
    pub a: f64,
    pub freeze: Option<(f64, State)>,
    pub sigma: Sym2,
    pub inv: Sym2,
    pub log_det: f64,
}

/// `w` and `q = ⟨Σ⁻¹w, w⟩`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateOffset {
    pub w: State,
    pub q: f64,
}

/// Selector for [`KernelFrame::derivative`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Derivative {
    X1,
    X2,
    X1X1,
    X1X2,
    X1X1X1,
    X1X1X2,
}

/// The kernel and its closed-form `x`-derivatives at one offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelDerivatives {
    pub f: f64,
    pub d1: f64,
    pub d2: f64,
    pub d11: f64,
    pub d12: f64,
    pub d111: f64,
    pub d112: f64,
}

impl KernelDerivatives {
    #[inline]
    fn from_parts(f: f64, p: State, inv: Sym2) -> Self {
        Self {
            f,
            d1: -f * p[0],
            d2: -f * p[1],
            d11: f * (p[0] * p[0] - inv.xx),
            d12: f * (p[0] * p[1] - inv.xy),
            d111: f * (3.0 * p[0] * inv.xx - p[0] * p[0] * p[0]),
            d112: f * (2.0 * p[0] * inv.xy + p[1] * inv.xx - p[0] * p[0] * p[1]),
        }
    }

    pub fn get(&self, which: Derivative) -> f64 {
        match which {
            Derivative::X1 => self.d1,
            Derivative::X2 => self.d2,
            Derivative::X1X1 => self.d11,
            Derivative::X1X2 => self.d12,
            Derivative::X1X1X1 => self.d111,
            Derivative::X1X1X2 => self.d112,
        }
    }
}

impl KernelFrame {
    /// Frame over `[s, t]` with variance `a`.
    pub fn new(driver: &BVDriver, s: f64, t: f64, a: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::InvalidParameter(format!("variance must be positive, got {a}")));
        }
        Ok(Self::from_geometry(WindowGeometry::new(driver, s, t)?, a, None))
    }

    /// Frame frozen at `(r, z)`: variance `σ²_r(z)`.
    pub fn frozen_at(driver: &BVDriver, field: &CoefficientField, s: f64, t: f64, r: f64, z: State) -> Result<Self> {
        let geometry = WindowGeometry::new(driver, s, t)?;
        Ok(Self::from_geometry(geometry, field.sigma2(r, z), Some((r, z))))
    }

    pub fn from_geometry(geometry: WindowGeometry, a: f64, freeze: Option<(f64, State)>) -> Self {
        Self {
            geometry,
            a,
            freeze,
            sigma: geometry.sigma1.scale(a),
            inv: geometry.inv1.scale(1.0 / a),
            log_det: geometry.log_det1 + 2.0 * a.ln(),
        }
    }

    pub fn det(&self) -> f64 {
        self.log_det.exp()
    }

    pub fn e_map(&self, y: State) -> State {
        self.geometry.e_map(y)
    }

    pub fn e_inv(&self, x: State) -> State {
        self.geometry.e_inv(x)
    }

    pub fn offset(&self, x: State, y: State) -> StateOffset {
        let w = self.geometry.offset_w(x, y);
        StateOffset { w, q: self.inv.quad(w) }
    }

    pub fn log_density(&self, x: State, y: State) -> f64 {
        let o = self.offset(x, y);
        -0.5 * o.q - 0.5 * self.log_det - LN_2PI
    }

    pub fn density(&self, x: State, y: State) -> f64 {
        self.log_density(x, y).exp()
    }

    pub fn derivatives(&self, x: State, y: State) -> KernelDerivatives {
        let o = self.offset(x, y);
        let f = (-0.5 * o.q - 0.5 * self.log_det - LN_2PI).exp();
        KernelDerivatives::from_parts(f, self.inv.apply(o.w), self.inv)
    }

    pub fn derivative(&self, x: State, y: State, which: Derivative) -> f64 {
        self.derivatives(x, y).get(which)
    }
}

/// Free-function form of [`WindowGeometry::e_map`].
pub fn e_map(driver: &BVDriver, s: f64, t: f64, y: State) -> State {
    let inc = driver.increment(s, t);
    [y[0], y[1] - inc * y[0]]
}

/// Free-function form of [`WindowGeometry::e_inv`].
pub fn e_inv_map(driver: &BVDriver, s: f64, t: f64, x: State) -> State {
    let inc = driver.increment(s, t);
    [x[0], x[1] + inc * x[0]]
}

/// Frozen density `f_{r,z}(s, x; t, y)` with the variance taken at `(r, z)`.
pub fn frozen_density(frame: &KernelFrame, x: State, y: State) -> f64 {
    frame.density(x, y)
}

/// Comparison envelopes at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Envelopes {
    /// Gaussian kernel at variance `4 a_high`.
    pub f_circ: f64,
    /// Gaussian kernel at variance `8 a_high`.
    pub f_circ_half: f64,
    /// `ϖ = ϖ¹ ϖ²`.
    pub varpi: f64,
}

/// Constant and exponents of the `ϖ¹` factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarpiShape {
    pub c: f64,
    pub beta1_prime: f64,
    pub beta2_prime: f64,
}

impl VarpiShape {
    pub fn from_exponents(beta: [f64; 5], c: f64) -> Self {
        Self { c, beta1_prime: beta[1] - beta[0], beta2_prime: beta[2] - beta[0] }
    }

    fn scaled_norm(&self, tau: f64, w: State) -> f64 {
        w[0] * w[0] / tau.powf(1.0 + self.beta1_prime) + w[1] * w[1] / tau.powf(1.0 + self.beta2_prime)
    }

    /// `ϖ¹ ϖ²` at offset `w` over a window with unit-variance geometry `g`.
    pub fn eval(&self, g: &WindowGeometry, a_high: f64, w: State) -> f64 {
        let v1 = self.c * (-self.scaled_norm(g.tau, w) / self.c).exp();
        let v2 = (-0.5 * g.inv1.quad(w) / (4.0 * a_high)).exp();
        v1 * v2
    }
}

pub fn reference_envelopes(
    driver: &BVDriver,
    s: f64,
    x: State,
    t: f64,
    y: State,
    a_high: f64,
    varpi: &VarpiShape,
) -> Result<Envelopes> {
    let g = WindowGeometry::new(driver, s, t)?;
    let w = g.offset_w(x, y);
    Ok(Envelopes {
        f_circ: g.density_w(4.0 * a_high, w),
        f_circ_half: g.density_w(8.0 * a_high, w),
        varpi: varpi.eval(&g, a_high, w),
    })
}

/// Smallest `ϖ¹` constant for which `f_a ≤ ϖ f°` holds on sampled windows,
/// offsets and variances `a ∈ [a_low, a_high]`.
pub fn calibrate_varpi(
    driver: &BVDriver,
    a_low: f64,
    a_high: f64,
    samples: &[(f64, f64, State, f64)],
) -> Result<VarpiShape> {
    let beta = driver.exponents().unwrap_or([0.0, 0.0, 2.0, 2.0, 1.0]);
    let mut pts = Vec::with_capacity(samples.len());
    for &(s, t, w, u) in samples {
        let g = WindowGeometry::new(driver, s, t)?;
        let a = a_low + u * (a_high - a_low);
        pts.push((g, w, g.density_w(a, w) / g.density_w(4.0 * a_high, w)));
    }
    let holds = |c: f64| {
        let shape = VarpiShape::from_exponents(beta, c);
        pts.iter().all(|(g, w, ratio)| *ratio <= shape.eval(g, a_high, *w) * (1.0 + 1e-12))
    };
    let (mut lo, mut hi) = (1e-6, 1.0);
    while !holds(hi) {
        hi *= 2.0;
        if hi > 1e12 {
            return Ok(VarpiShape::from_exponents(beta, f64::INFINITY));
        }
    }
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(VarpiShape::from_exponents(beta, hi))
}

/// One-step parametrix integrand in original coordinates, frozen at the
/// target `(t, y)`:
///
/// `Δ₀(s,x;t,y) = μ_s(x) ∂_{x₁}f + ½ (σ²_s(x) - σ²_t(y)) ∂²_{x₁x₁}f`,
/// with `f = f_{t,y}(s, x; t, y)`.
pub fn delta0(driver: &BVDriver, field: &CoefficientField, s: f64, x: State, t: f64, y: State) -> Result<f64> {
    let g = WindowGeometry::new(driver, s, t)?;
    Ok(delta0_in(&g, field, x, y))
}

/// [`delta0`] with a precomputed window geometry.
#[inline]
pub fn delta0_in(g: &WindowGeometry, field: &CoefficientField, x: State, y: State) -> f64 {
    let a = field.sigma2(g.t, y);
    let w = g.offset_w(x, y);
    let mu = field.mu(g.s, x);
    let da = field.sigma2(g.s, x) - a;
    if mu == 0.0 && da == 0.0 {
        return 0.0;
    }
    let p0 = g.inv1.xx * w[0] + g.inv1.xy * w[1];
    let p0 = p0 / a;
    let f = g.density_w(a, w);
    let d1 = -f * p0;
    let d11 = f * (p0 * p0 - g.inv1.xx / a);
    mu * d1 + 0.5 * da * d11
}

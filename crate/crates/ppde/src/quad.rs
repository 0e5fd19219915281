//! Quadrature building blocks shared by the driver moments and the
//! parametrix convolutions.
//!
//! Node tables come from `gauss-quad`; this module only rescales them and
//! adds the two-edge power substitution used for weakly singular time
//! integrands.

use std::num::NonZeroUsize;

use gauss_quad::{GaussHermite, GaussLegendre};

/// Gauss-Legendre nodes and weights mapped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct UnitLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl UnitLegendre {
    pub fn new(n: usize) -> Self {
        let rule = GaussLegendre::new(NonZeroUsize::new(n.max(1)).unwrap());
        let mut pairs: Vec<(f64, f64)> = rule
            .as_node_weight_pairs()
            .iter()
            .map(|&(x, w)| (0.5 * (x + 1.0), 0.5 * w))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let h = b - a;
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&u, &w)| w * f(a + h * u))
            .sum::<f64>()
            * h
    }
}

/// Time rule on `[s, t]` that absorbs integrable power singularities at
/// both endpoints.
///
/// Each half of the interval is mapped through `r = edge ± (τ/2) u^p` with
/// `p = 1/κ`, so an integrand behaving like `|r - edge|^{κ-1}` becomes
/// bounded in `u` and Gauss-Legendre converges quickly. Positions are stored
/// as fractions `θ ∈ (0, 1)` of the window, weights sum to one.
#[derive(Debug, Clone)]
pub struct TimeRule {
    pub theta: Vec<f64>,
    pub weight: Vec<f64>,
    pub exponent: f64,
}

impl TimeRule {
    pub fn new(nodes_per_half: usize, kappa: f64) -> Self {
        let p = if kappa > 0.0 && kappa < 1.0 { 1.0 / kappa } else { 1.0 };
        let gl = UnitLegendre::new(nodes_per_half);
        let mut theta = Vec::with_capacity(2 * nodes_per_half);
        let mut weight = Vec::with_capacity(2 * nodes_per_half);
        for (&u, &w) in gl.nodes.iter().zip(&gl.weights) {
            theta.push(0.5 * u.powf(p));
            weight.push(0.5 * p * u.powf(p - 1.0) * w);
        }
        for (&u, &w) in gl.nodes.iter().zip(&gl.weights).rev() {
            theta.push(1.0 - 0.5 * u.powf(p));
            weight.push(0.5 * p * u.powf(p - 1.0) * w);
        }
        Self { theta, weight, exponent: p }
    }

    /// `(r, dr-weight)` pairs for the window `[s, t]`.
    pub fn nodes(&self, s: f64, t: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let tau = t - s;
        self.theta
            .iter()
            .zip(&self.weight)
            .map(move |(&th, &w)| (s + tau * th, tau * w))
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Tensor Gauss-Hermite rule for `∫ φ(ξ) h(ξ) dξ` with `φ` the standard
/// bivariate normal density.
#[derive(Debug, Clone)]
pub struct NormalRule2 {
    pub nodes: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl NormalRule2 {
    pub fn new(n: usize) -> Self {
        let rule = GaussHermite::new(NonZeroUsize::new(n.max(1)).unwrap());
        let one: Vec<(f64, f64)> = rule
            .as_node_weight_pairs()
            .iter()
            .map(|&(x, w)| (std::f64::consts::SQRT_2 * x, w / std::f64::consts::PI.sqrt()))
            .collect();
        let mut nodes = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for &(a, wa) in &one {
            for &(b, wb) in &one {
                let w = wa * wb;
                if w > 1e-15 {
                    nodes.push([a, b]);
                    weights.push(w);
                }
            }
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Adaptive Simpson quadrature with a mixed absolute/relative stopping rule.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let tol = abs_tol.max(rel_tol * whole.abs());
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 40)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    let floor = 64.0 * f64::EPSILON * (left.abs() + right.abs());
    if depth == 0 || diff.abs() <= 15.0 * tol.max(floor) {
        return left + right + diff / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Tanh-sinh rule on `[a, b]`, robust to endpoint singularities. Used as an
/// independent reference in tests and diagnostics.
pub fn tanh_sinh(f: impl Fn(f64) -> f64, a: f64, b: f64, level: u32) -> f64 {
    let h = 2f64.powi(-(level as i32));
    let half = 0.5 * (b - a);
    let kmax = (4.0 / h) as i64;
    let mut sum = 0.0;
    for k in -kmax..=kmax {
        let t = k as f64 * h;
        let s = std::f64::consts::FRAC_PI_2 * t.sinh();
        let c = s.cosh();
        let w = std::f64::consts::FRAC_PI_2 * t.cosh() / (c * c);
        // distance to the nearer endpoint, computed without cancellation
        let d = 1.0 / (s.abs().exp() * c);
        if d * half <= 0.0 || w < 1e-300 {
            continue;
        }
        let xr = if t >= 0.0 { b - half * d } else { a + half * d };
        if xr <= a || xr >= b {
            continue;
        }
        sum += w * f(xr);
    }
    sum * h * half
}

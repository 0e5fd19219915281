use crate::gaussian_kernel::{State, Sym2};
use crate::interp::SplineGrid;
use crate::quad::NormalRule2;

/// Affine Gaussian frame `z = c + L ξ` with `L` lower triangular.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Frame {
    pub c: State,
    pub l: [f64; 3],
    pub det_l: f64,
}

impl Frame {
    pub fn from_cov(c: State, cov: Sym2) -> Self {
        let l = cov.cholesky();
        Self { c, l, det_l: l[0] * l[2] }
    }

    #[inline]
    pub fn to_xi(&self, z: State) -> State {
        let a = (z[0] - self.c[0]) / self.l[0];
        let b = (z[1] - self.c[1] - self.l[1] * a) / self.l[2];
        [a, b]
    }

    #[inline]
    pub fn from_xi(&self, xi: State) -> State {
        [self.c[0] + self.l[0] * xi[0], self.c[1] + self.l[1] * xi[0] + self.l[2] * xi[1]]
    }

    /// Inverse covariance `(L Lᵀ)⁻¹`.
    pub fn precision(&self) -> Sym2 {
        Sym2 { xx: self.l[0] * self.l[0], xy: self.l[0] * self.l[1], yy: self.l[1] * self.l[1] + self.l[2] * self.l[2] }
            .inverse()
    }
}

/// Covariance of `y = E⁻¹(x - ω)` when `ω ~ N(0, Σ)` and `E⁻¹` adds
/// `inc · x₁` to the second coordinate.
#[inline]
pub(crate) fn pushed_cov(sigma: Sym2, inc: f64) -> Sym2 {
    Sym2 { xx: sigma.xx, xy: sigma.xy + inc * sigma.xx, yy: sigma.yy + 2.0 * inc * sigma.xy + inc * inc * sigma.xx }
}

/// Gauss-Hermite nodes for the product of two Gaussian frames given by
/// precision matrices and means.
pub(crate) struct ProductNodes<'a> {
    rule: &'a NormalRule2,
    adjusted: &'a [f64],
    frame: Frame,
}

impl<'a> ProductNodes<'a> {
    #[inline]
    pub fn new(rule: &'a NormalRule2, adjusted: &'a [f64], p1: Sym2, m1: State, p2: Sym2, m2: State) -> Self {
        let p = p1.add(&p2);
        let cov = p.inverse();
        let b = [p1.apply(m1), p2.apply(m2)];
        let mean = cov.apply([b[0][0] + b[1][0], b[0][1] + b[1][1]]);
        Self { rule, adjusted, frame: Frame::from_cov(mean, cov) }
    }

    /// Iterates `(z, weight)` with `Σ weight · h(z) ≈ ∫ h(z) dz`.
    #[inline]
    pub fn iter(&self) -> impl Iterator<Item = (State, f64)> + '_ {
        let det = self.frame.det_l;
        self.rule
            .nodes
            .iter()
            .zip(self.adjusted)
            .map(move |(u, w)| (self.frame.from_xi(*u), w * det))
    }
}

/// Rule weights multiplied by `2π exp(|u|²/2)`, the inverse standard
/// normal density at each node.
pub(crate) fn adjusted_weights(rule: &NormalRule2) -> Vec<f64> {
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(u, w)| w * 2.0 * std::f64::consts::PI * (0.5 * (u[0] * u[0] + u[1] * u[1])).exp())
        .collect()
}

/// Linear combination of spline coefficient grids (splines are linear in
/// their data, so this interpolates the underlying tables).
pub(crate) fn combine(parts: &[(&SplineGrid, f64)]) -> SplineGrid {
    let mut out = parts[0].0.clone();
    out.scale_in_place(parts[0].1);
    for (g, w) in &parts[1..] {
        out.add_scaled(g, *w);
    }
    out
}

/// Cubic (or lower, near the ends) Lagrange weights for `x` over the
/// increasing or decreasing abscissae `xs`; outside the range the nearest
/// value is held constant.
pub(crate) fn lagrange(xs: &[f64], x: f64) -> Vec<(usize, f64)> {
    let n = xs.len();
    if n == 1 {
        return vec![(0, 1.0)];
    }
    let increasing = xs[n - 1] > xs[0];
    let inside = if increasing { x >= xs[0] && x <= xs[n - 1] } else { x <= xs[0] && x >= xs[n - 1] };
    if !inside {
        let near_first = (x - xs[0]).abs() < (x - xs[n - 1]).abs();
        return vec![(if near_first { 0 } else { n - 1 }, 1.0)];
    }
    // segment k with x between xs[k], xs[k+1]
    let mut k = 0;
    while k + 2 < n && (if increasing { x > xs[k + 1] } else { x < xs[k + 1] }) {
        k += 1;
    }
    let lo = k.saturating_sub(1);
    let hi = (k + 2).min(n - 1);
    let idx: Vec<usize> = (lo..=hi).collect();
    idx.iter()
        .map(|&i| {
            let w = idx
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| (x - xs[j]) / (xs[i] - xs[j]))
                .product::<f64>();
            (i, w)
        })
        .collect()
}

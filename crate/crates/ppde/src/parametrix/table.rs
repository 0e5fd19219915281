use super::frame::{combine, lagrange, Frame};
use crate::interp::SplineGrid;

/// Per-order spline tables on a ladder of time slices. Slice `j` stores
/// `ψ(ξ)` on the normalized grid of its frame, with the tabulated function
/// recovered as `gap^e · ψ(ξ) · exp(-|ξ|²/2) / (2π det L)`.
#[derive(Debug, Clone)]
pub(crate) struct SliceTable {
    pub lambda: Vec<f64>,
    pub orders: Vec<Vec<SplineGrid>>,
    pub exponents: Vec<f64>,
}

impl SliceTable {
    pub fn new(gaps: Vec<f64>) -> Self {
        let lambda = gaps.iter().map(|g| g.ln()).collect();
        Self { lambda, orders: Vec::new(), exponents: Vec::new() }
    }

    pub fn push_order(&mut self, exponent: f64, grids: Vec<SplineGrid>) {
        self.exponents.push(exponent);
        self.orders.push(grids);
    }

    /// Spline whose value at `ξ` times `exp(-|ξ|²/2)` is the sum of the
    /// selected stored orders at the given gap.
    pub fn combined(&self, gap: f64, frame: &Frame, orders: std::ops::Range<usize>) -> Option<SplineGrid> {
        if orders.is_empty() || orders.end > self.orders.len() {
            return None;
        }
        self.combined_scaled(gap, 1.0 / (2.0 * std::f64::consts::PI * frame.det_l), orders)
    }

    /// As [`SliceTable::combined`] with an explicit prefactor instead of the
    /// Gaussian normalization.
    pub fn combined_scaled(&self, gap: f64, base: f64, orders: std::ops::Range<usize>) -> Option<SplineGrid> {
        if orders.is_empty() || orders.end > self.orders.len() {
            return None;
        }
        let weights = lagrange(&self.lambda, gap.ln());
        let mut parts = Vec::with_capacity(weights.len() * orders.len());
        for k in orders {
            let scale = base * gap.powf(self.exponents[k]);
            for &(j, w) in &weights {
                parts.push((&self.orders[k][j], w * scale));
            }
        }
        Some(combine(&parts))
    }
}

/// Evaluates a combined spline at `z` in `frame`.
#[inline]
pub(crate) fn eval_in(frame: &Frame, spline: &SplineGrid, z: [f64; 2]) -> f64 {
    let xi = frame.to_xi(z);
    let v = spline.eval(xi);
    if v == 0.0 {
        0.0
    } else {
        v * (-0.5 * (xi[0] * xi[0] + xi[1] * xi[1])).exp()
    }
}

/// Gaps `span · q^j` graded geometrically from `span` down to `span · min_gap`.
pub(crate) fn graded_gaps(span: f64, slices: usize, min_gap: f64) -> Vec<f64> {
    let n = slices.max(2);
    let q = min_gap.powf(1.0 / (n - 1) as f64);
    (0..n).map(|j| span * q.powi(j as i32)).collect()
}

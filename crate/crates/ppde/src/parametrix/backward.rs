use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::{gamma, ln_gamma};

use super::frame::{Frame, ProductNodes};
use super::table::{eval_in, graded_gaps, SliceTable};
use super::{delta0_parts, Core, Rules};
use crate::error::{Error, Result};
use crate::gaussian_kernel::{State, Sym2, WindowGeometry};
use crate::interp::SplineGrid;

/// One time node of a convolution over `[s, t]`.
struct Node {
    r: f64,
    weight: f64,
    left: WindowGeometry,
    left_prec1: Sym2,
    right: WindowGeometry,
    frame: Frame,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Left {
    Delta0,
    Density,
    DensityDx1,
}

/// `Φ` at a point with its truncation diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhiValue {
    pub value: f64,
    pub delta0: f64,
    pub order: usize,
    pub tail_estimate: f64,
    pub converged: bool,
}

/// Transition density at a point, split into the frozen leading kernel and
/// the correction integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityValue {
    pub leading: f64,
    pub correction: f64,
    /// `max(leading + correction, 0)`.
    pub value: f64,
    /// Amount removed by the clamp (zero when the raw value is non-negative).
    pub clamped: f64,
    pub order: usize,
    pub tail_estimate: f64,
}

impl DensityValue {
    pub fn raw(&self) -> f64 {
        self.leading + self.correction
    }
}

/// Volterra equation check at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VolterraResidual {
    pub phi: f64,
    pub delta0: f64,
    /// `∫∫ Δ₀(s,x;r,z) Φ(r,z;t,y) dz dr` with the finer rule.
    pub integral: f64,
    pub residual: f64,
    /// `(t-s)^{κ₀-1} f°(s,x;t,y)`.
    pub envelope: f64,
}

impl VolterraResidual {
    /// Residual relative to the `Φ` envelope; infinite when the envelope
    /// underflows but the residual does not, zero when both vanish.
    pub fn relative(&self) -> f64 {
        if self.envelope > 0.0 {
            self.residual.abs() / self.envelope
        } else if self.residual == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Tabulated parametrix orders `Δ_1, …, Δ_K` for one target `(t, y)`.
pub struct ParametrixTable {
    core: Arc<Core>,
    pub t: f64,
    pub y: State,
    /// Truncation order `K`: `Φ ≈ Δ₀ + … + Δ_K`.
    pub order: usize,
    /// `sup |Δ_k| / ((t-r)^{(k+1)κ₀-1} f°)` over the slice grids, `k = 0..=K`.
    pub sup_norms: Vec<f64>,
    /// Constants fitted to successive ratios of `sup_norms`.
    pub ratio_constants: Vec<f64>,
    /// Smallest `C` with `sup_norms[k] ≤ M_{k+1}(C)` for every computed order.
    pub bound_constant: f64,
    /// `Σ_{j>K+1} M_j(C) t^{jκ₀}` with `C = bound_constant`.
    pub tail_bound: f64,
    /// Predicted tail of the series relative to the partial sum.
    pub tail_estimate: f64,
    pub converged: bool,
    pub grid_points: usize,
    pub radius: f64,
    pub time_nodes: usize,
    pub space_nodes: usize,
    pub substitution_exponent: f64,
    times: Vec<f64>,
    frames: Vec<Frame>,
    slices: SliceTable,
}

impl std::fmt::Debug for ParametrixTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParametrixTable")
            .field("t", &self.t)
            .field("y", &self.y)
            .field("order", &self.order)
            .field("sup_norms", &self.sup_norms)
            .field("tail_estimate", &self.tail_estimate)
            .field("converged", &self.converged)
            .finish()
    }
}

/// `M_k(C) = (C Γ(κ))^k / Γ(kκ)` in logs.
pub(crate) fn ln_m(k: usize, c: f64, kappa: f64) -> f64 {
    k as f64 * (c * gamma(kappa)).ln() - ln_gamma(k as f64 * kappa)
}

impl ParametrixTable {
    pub(crate) fn build(core: Arc<Core>, t: f64, y: State) -> Result<Self> {
        let cfg = core.config;
        let kappa = core.kappa;
        let gaps = graded_gaps(t, cfg.slices, cfg.min_gap);
        let times: Vec<f64> = gaps.iter().map(|g| t - g).collect();
        let mut frames = Vec::with_capacity(times.len());
        for &r in &times {
            frames.push(core.backward_frame(&core.geometry(r, t)?, y));
        }
        let mut tab = Self {
            t,
            y,
            order: 0,
            sup_norms: Vec::new(),
            ratio_constants: Vec::new(),
            bound_constant: 0.0,
            tail_bound: 0.0,
            tail_estimate: 0.0,
            converged: true,
            grid_points: cfg.grid_points,
            radius: cfg.radius,
            time_nodes: core.rules.time.len(),
            space_nodes: core.rules.space.len(),
            substitution_exponent: core.rules.time.exponent,
            times,
            frames,
            slices: SliceTable::new(gaps),
            core,
        };
        if tab.core.field.has_exact_parametrix() {
            tab.sup_norms.push(0.0);
            return Ok(tab);
        }
        tab.sup_norms.push(tab.delta0_sup()?);
        let nodes: Vec<Vec<Node>> = tab
            .times
            .iter()
            .map(|&r| tab.nodes(r, &tab.core.rules))
            .collect::<Result<_>>()?;
        let span_pow = t.powf(kappa);
        let mut tail = f64::INFINITY;
        for k in 1..=cfg.k_max {
            let grids = tab.build_order(k, &nodes);
            tab.slices.push_order((k + 1) as f64 * kappa - 1.0, grids);
            tab.order = k;
            let nk = tab.order_sup(k);
            tab.sup_norms.push(nk);
            let prev = tab.sup_norms[k - 1];
            if nk == 0.0 || prev == 0.0 {
                tail = 0.0;
                break;
            }
            let c = (nk / prev) * gamma((k + 1) as f64 * kappa) / (gamma(kappa) * gamma(k as f64 * kappa));
            tab.ratio_constants.push(c);
            let partial: f64 = tab.sup_norms.iter().enumerate().map(|(j, n)| n * span_pow.powi(j as i32)).sum();
            let mut term = nk * span_pow.powi(k as i32);
            let mut sum = 0.0;
            for j in k..k + 400 {
                let g = gamma((j + 1) as f64 * kappa) / gamma((j + 2) as f64 * kappa);
                term *= c * gamma(kappa) * g * span_pow;
                sum += term;
                if term < 1e-6 * cfg.tolerance * partial || !term.is_finite() {
                    break;
                }
            }
            tail = sum / partial;
            if tail <= cfg.tolerance {
                break;
            }
        }
        tab.tail_estimate = tail;
        tab.converged = tail <= cfg.tolerance;
        tab.bound_constant = tab
            .sup_norms
            .iter()
            .enumerate()
            .map(|(k, n)| (n * gamma((k + 1) as f64 * kappa)).powf(1.0 / (k + 1) as f64) / gamma(kappa))
            .fold(0.0, f64::max);
        tab.tail_bound = tail_bound(tab.bound_constant, kappa, t, tab.order + 2);
        Ok(tab)
    }

    /// Fails with the diagnostics when the series stopped at `K_max`
    /// without meeting the tolerance.
    pub fn require_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NonConvergence { order: self.order, tail: self.tail_estimate, target: self.core.config.tolerance })
        }
    }

    /// Slice times `r_j` of the table, latest last.
    pub fn slice_times(&self) -> &[f64] {
        &self.times
    }

    /// Time nodes of the convolution over `[s, t]`.
    fn nodes(&self, s: f64, rules: &Rules) -> Result<Vec<Node>> {
        let core = &self.core;
        rules
            .time
            .nodes(s, self.t)
            .map(|(r, weight)| {
                let left = core.geometry(s, r)?;
                let right = core.geometry(r, self.t)?;
                Ok(Node {
                    r,
                    weight,
                    left,
                    left_prec1: super::frame::pushed_cov(left.sigma1, left.increment).inverse(),
                    right,
                    frame: core.backward_frame(&right, self.y),
                })
            })
            .collect()
    }

    fn combos(&self, nodes: &[Node], orders: Range<usize>) -> Vec<Option<SplineGrid>> {
        nodes
            .iter()
            .map(|n| self.slices.combined(self.t - n.r, &n.frame, orders.clone()))
            .collect()
    }

    /// `∫_s^t dr ∫ dw L(s, x; r, w) H(r, w)` with `H = Δ₀(·; t, y)` when
    /// `closed`, plus the tabulated orders in `combos`.
    fn convolve(
        &self,
        s: f64,
        x: State,
        left: Left,
        closed: bool,
        nodes: &[Node],
        combos: &[Option<SplineGrid>],
        rules: &Rules,
    ) -> f64 {
        let field = &self.core.field;
        let y = self.y;
        let a_t = field.sigma2(self.t, y);
        let mu_x = field.mu(s, x);
        let s2_x = field.sigma2(s, x);
        let mut total = 0.0;
        for (node, combo) in nodes.iter().zip(combos) {
            let r = node.r;
            let g = &node.left;
            let mean = g.e_inv(x);
            let a_mean = field.sigma2(r, mean);
            let p_left = node.left_prec1.scale(1.0 / a_mean);
            let lf = |w: State, a_w: f64| -> f64 {
                match left {
                    Left::Delta0 => delta0_parts(g, mu_x, s2_x, x, w, a_w),
                    Left::Density => g.density_w(a_w, g.offset_w(x, w)),
                    Left::DensityDx1 => {
                        let off = g.offset_w(x, w);
                        let p0 = (g.inv1.xx * off[0] + g.inv1.xy * off[1]) / a_w;
                        -g.density_w(a_w, off) * p0
                    }
                }
            };
            let mut acc = 0.0;
            if closed {
                let rg = &node.right;
                let pn = ProductNodes::new(
                    &rules.space,
                    &rules.adjusted,
                    p_left,
                    mean,
                    rg.inv1.scale(1.0 / a_t),
                    rg.e_map(y),
                );
                for (w, wt) in pn.iter() {
                    let a_w = field.sigma2(r, w);
                    let inner = delta0_parts(rg, field.mu(r, w), a_w, w, y, a_t);
                    acc += wt * lf(w, a_w) * inner;
                }
            }
            if let Some(spline) = combo {
                let fr = &node.frame;
                let pn = ProductNodes::new(&rules.space, &rules.adjusted, p_left, mean, fr.precision(), fr.c);
                for (w, wt) in pn.iter() {
                    let inner = eval_in(fr, spline, w);
                    if inner != 0.0 {
                        acc += wt * lf(w, field.sigma2(r, w)) * inner;
                    }
                }
            }
            total += node.weight * acc;
        }
        total
    }

    fn grid_xi(&self, idx: usize) -> Option<State> {
        let n = self.grid_points;
        let h = 2.0 * self.radius / (n - 1) as f64;
        let xi = [-self.radius + h * (idx / n) as f64, -self.radius + h * (idx % n) as f64];
        (xi[0] * xi[0] + xi[1] * xi[1] <= self.radius * self.radius).then_some(xi)
    }

    fn build_order(&self, k: usize, nodes: &[Vec<Node>]) -> Vec<SplineGrid> {
        let n = self.grid_points;
        let e = (k + 1) as f64 * self.core.kappa - 1.0;
        (0..self.times.len())
            .map(|i| {
                let r = self.times[i];
                let frame = self.frames[i];
                let combos = if k == 1 { vec![None; nodes[i].len()] } else { self.combos(&nodes[i], k - 2..k - 1) };
                let scale = 2.0 * std::f64::consts::PI * frame.det_l / (self.t - r).powf(e);
                let values: Vec<f64> = (0..n * n)
                    .into_par_iter()
                    .map(|idx| match self.grid_xi(idx) {
                        None => 0.0,
                        Some(xi) => {
                            let z = frame.from_xi(xi);
                            let v = self.convolve(r, z, Left::Delta0, k == 1, &nodes[i], &combos, &self.core.rules);
                            v * scale * (0.5 * (xi[0] * xi[0] + xi[1] * xi[1])).exp()
                        }
                    })
                    .collect();
                SplineGrid::new(n, self.radius, &values)
            })
            .collect()
    }

    /// `sup 4|ψ| exp(-3|ξ|²/8)`, which is `|Δ_k| / (gap^e f°)` on the grid.
    fn order_sup(&self, k: usize) -> f64 {
        let n = self.grid_points;
        let mut best = 0.0f64;
        for grid in &self.slices.orders[k - 1] {
            for idx in 0..n * n {
                if let Some(xi) = self.grid_xi(idx) {
                    let v = grid.eval(xi);
                    best = best.max(4.0 * v.abs() * (-0.375 * (xi[0] * xi[0] + xi[1] * xi[1])).exp());
                }
            }
        }
        best
    }

    fn delta0_sup(&self) -> Result<f64> {
        let core = &self.core;
        let n = self.grid_points;
        let mut best = 0.0f64;
        for (i, &r) in self.times.iter().enumerate() {
            let g = core.geometry(r, self.t)?;
            let scale = (self.t - r).powf(core.kappa - 1.0);
            for idx in 0..n * n {
                if let Some(xi) = self.grid_xi(idx) {
                    let z = self.frames[i].from_xi(xi);
                    let d = crate::gaussian_kernel::delta0_in(&g, &core.field, z, self.y);
                    let fc = g.density_w(4.0 * core.a_ref, g.offset_w(z, self.y));
                    if fc > 0.0 {
                        best = best.max(d.abs() / (scale * fc));
                    }
                }
            }
        }
        Ok(best)
    }

    fn check_time(&self, s: f64) -> Result<()> {
        if !(s < self.t) {
            return Err(Error::EmptyWindow { s, t: self.t });
        }
        if s < 0.0 {
            return Err(Error::TimeOutOfRange { t: s, horizon: self.core.driver.horizon() });
        }
        Ok(())
    }

    fn exact(&self) -> bool {
        self.core.field.has_exact_parametrix()
    }

    /// `Δ_k(s, x; t, y)` for `1 ≤ k ≤ K + 1`.
    pub fn delta_k(&self, k: usize, s: f64, x: State) -> Result<f64> {
        self.check_time(s)?;
        if k == 0 {
            let g = self.core.geometry(s, self.t)?;
            return Ok(crate::gaussian_kernel::delta0_in(&g, &self.core.field, x, self.y));
        }
        if self.exact() {
            return Ok(0.0);
        }
        if k > self.order + 1 {
            return Err(Error::InvalidParameter(format!("order {k} exceeds the tabulated order {} plus one", self.order)));
        }
        let nodes = self.nodes(s, &self.core.rules)?;
        let combos = if k == 1 { vec![None; nodes.len()] } else { self.combos(&nodes, k - 2..k - 1) };
        Ok(self.convolve(s, x, Left::Delta0, k == 1, &nodes, &combos, &self.core.rules))
    }

    pub fn phi(&self, s: f64, x: State) -> Result<PhiValue> {
        self.check_time(s)?;
        let g = self.core.geometry(s, self.t)?;
        let d0 = crate::gaussian_kernel::delta0_in(&g, &self.core.field, x, self.y);
        let value = if self.exact() || self.order == 0 {
            d0
        } else {
            let nodes = self.nodes(s, &self.core.rules)?;
            let combos = self.combos(&nodes, 0..self.order - 1);
            d0 + self.convolve(s, x, Left::Delta0, true, &nodes, &combos, &self.core.rules)
        };
        Ok(PhiValue {
            value,
            delta0: d0,
            order: self.order,
            tail_estimate: self.tail_estimate,
            converged: self.converged,
        })
    }

    fn leading(&self, s: f64, x: State) -> Result<(f64, f64)> {
        let g = self.core.geometry(s, self.t)?;
        let a = self.core.field.sigma2(self.t, self.y);
        let w = g.offset_w(x, self.y);
        let f = g.density_w(a, w);
        let p0 = (g.inv1.xx * w[0] + g.inv1.xy * w[1]) / a;
        Ok((f, -f * p0))
    }

    fn correction(&self, s: f64, x: State, left: Left) -> Result<f64> {
        if self.exact() {
            return Ok(0.0);
        }
        let nodes = self.nodes(s, &self.core.rules)?;
        let combos = self.combos(&nodes, 0..self.order);
        Ok(self.convolve(s, x, left, true, &nodes, &combos, &self.core.rules))
    }

    pub fn density(&self, s: f64, x: State) -> Result<DensityValue> {
        self.check_time(s)?;
        let (leading, _) = self.leading(s, x)?;
        let correction = self.correction(s, x, Left::Density)?;
        let raw = leading + correction;
        Ok(DensityValue {
            leading,
            correction,
            value: raw.max(0.0),
            clamped: (-raw).max(0.0),
            order: self.order,
            tail_estimate: self.tail_estimate,
        })
    }

    pub fn density_dx1(&self, s: f64, x: State) -> Result<f64> {
        self.check_time(s)?;
        let (_, d) = self.leading(s, x)?;
        Ok(d + self.correction(s, x, Left::DensityDx1)?)
    }

    pub fn volterra_residual(&self, s: f64, x: State) -> Result<VolterraResidual> {
        let phi = self.phi(s, x)?;
        let integral = if self.exact() {
            0.0
        } else {
            let fine = &self.core.fine;
            let nodes = self.nodes(s, fine)?;
            let combos = self.combos(&nodes, 0..self.order);
            self.convolve(s, x, Left::Delta0, true, &nodes, &combos, fine)
        };
        let g = self.core.geometry(s, self.t)?;
        let envelope =
            (self.t - s).powf(self.core.kappa - 1.0) * g.density_w(4.0 * self.core.a_ref, g.offset_w(x, self.y));
        Ok(VolterraResidual {
            phi: phi.value,
            delta0: phi.delta0,
            integral,
            residual: phi.value - phi.delta0 - integral,
            envelope,
        })
    }
}

/// `Σ_{j ≥ from} M_j(C) u^{jκ}`, summed in logs until the terms are negligible.
pub(crate) fn tail_bound(c: f64, kappa: f64, u: f64, from: usize) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut peak = f64::NEG_INFINITY;
    for j in from..from + 100_000 {
        let l = ln_m(j, c, kappa) + j as f64 * kappa * u.ln();
        peak = peak.max(l);
        sum += l.exp();
        if l < peak - 60.0 {
            break;
        }
    }
    sum
}

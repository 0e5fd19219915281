use std::sync::Arc;

use rayon::prelude::*;
use statrs::function::gamma::gamma;

use super::frame::{pushed_cov, Frame, ProductNodes};
use super::table::{eval_in, graded_gaps, SliceTable};
use super::{delta0_parts, Core, Rules};
use crate::error::{Error, Result};
use crate::gaussian_kernel::{State, Sym2, WindowGeometry};
use crate::interp::SplineGrid;

struct Node {
    r: f64,
    weight: f64,
    src: WindowGeometry,
    src_prec1: Sym2,
    right: WindowGeometry,
    frame: Frame,
}

/// Forward pieces `F_k(t, ·)` of the transition density from a fixed source,
/// `f(s, x; t, y) = Σ_k F_k(t, y)` with `F_0 = f_{t,y}(s, x; t, y)` and
/// `F_{k+1}(t, y) = ∫∫ F_k(r, z) Δ₀(r, z; t, y) dz dr`.
pub struct DensityField {
    core: Arc<Core>,
    pub s: f64,
    pub x: State,
    pub t_end: f64,
    /// Highest stored order.
    pub order: usize,
    /// `sup |F_k| / ((t-s)^{kκ₀} f°)` over the slice grids.
    pub sup_norms: Vec<f64>,
    pub tail_estimate: f64,
    pub converged: bool,
    times: Vec<f64>,
    frames: Vec<Frame>,
    slices: SliceTable,
    grid_points: usize,
    radius: f64,
}

impl std::fmt::Debug for DensityField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DensityField")
            .field("s", &self.s)
            .field("x", &self.x)
            .field("t_end", &self.t_end)
            .field("order", &self.order)
            .field("sup_norms", &self.sup_norms)
            .field("tail_estimate", &self.tail_estimate)
            .finish()
    }
}

impl DensityField {
    pub(crate) fn build(core: Arc<Core>, s: f64, x: State, t_end: f64) -> Result<Self> {
        if !(t_end > s) {
            return Err(Error::EmptyWindow { s, t: t_end });
        }
        let cfg = core.config;
        let kappa = core.kappa;
        let mut gaps = graded_gaps(t_end - s, cfg.slices, cfg.min_gap);
        gaps.reverse();
        let times: Vec<f64> = gaps.iter().map(|g| s + g).collect();
        let mut field = Self {
            s,
            x,
            t_end,
            order: 0,
            sup_norms: vec![1.0],
            tail_estimate: 0.0,
            converged: true,
            frames: Vec::new(),
            slices: SliceTable::new(gaps),
            grid_points: cfg.grid_points,
            radius: cfg.radius,
            times,
            core,
        };
        field.frames = field.times.iter().map(|&r| field.frame_at(r)).collect::<Result<_>>()?;
        if field.core.field.has_exact_parametrix() {
            return Ok(field);
        }
        let nodes: Vec<Vec<Node>> = field
            .times
            .iter()
            .map(|&t| field.nodes(t, &field.core.rules))
            .collect::<Result<_>>()?;
        let span_pow = (t_end - s).powf(kappa);
        let mut tail = f64::INFINITY;
        for k in 1..=cfg.k_max {
            let grids = field.build_order(k, &nodes);
            field.slices.push_order(k as f64 * kappa, grids);
            field.order = k;
            let nk = field.order_sup(k);
            field.sup_norms.push(nk);
            let prev = field.sup_norms[k - 1];
            if nk == 0.0 {
                tail = 0.0;
                break;
            }
            let c = (nk / prev) * gamma(k as f64 * kappa + 1.0) / gamma((k - 1) as f64 * kappa + 1.0);
            let partial: f64 = field.sup_norms.iter().enumerate().map(|(j, n)| n * span_pow.powi(j as i32)).sum();
            let mut term = nk * span_pow.powi(k as i32);
            let mut sum = 0.0;
            for j in k..k + 400 {
                term *= c * span_pow * gamma(j as f64 * kappa + 1.0) / gamma((j + 1) as f64 * kappa + 1.0);
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
        field.tail_estimate = tail;
        field.converged = tail <= cfg.tolerance;
        Ok(field)
    }

    /// Frame at time `r`: the frozen-drift mean of `(X_r, I_r)` and the
    /// pushed covariance `E⁻¹ Σ_{s,r}(a_ref) E⁻ᵀ`.
    fn frame_at(&self, r: f64) -> Result<Frame> {
        let g = self.core.geometry(self.s, r)?;
        let b = self.core.field.mu(self.s, self.x);
        let tau = r - self.s;
        let c = [
            self.x[0] + b * tau,
            self.x[1] + self.x[0] * g.increment + b * tau * (g.increment - g.offset),
        ];
        Ok(Frame::from_cov(c, pushed_cov(g.sigma1.scale(self.core.a_ref), g.increment)))
    }

    fn nodes(&self, t: f64, rules: &Rules) -> Result<Vec<Node>> {
        rules
            .time
            .nodes(self.s, t)
            .map(|(r, weight)| {
                let src = self.core.geometry(self.s, r)?;
                Ok(Node {
                    r,
                    weight,
                    src_prec1: pushed_cov(src.sigma1, src.increment).inverse(),
                    src,
                    right: self.core.geometry(r, t)?,
                    frame: self.frame_at(r)?,
                })
            })
            .collect()
    }

    fn grid_xi(&self, idx: usize) -> Option<State> {
        let n = self.grid_points;
        let h = 2.0 * self.radius / (n - 1) as f64;
        let xi = [-self.radius + h * (idx / n) as f64, -self.radius + h * (idx % n) as f64];
        (xi[0] * xi[0] + xi[1] * xi[1] <= self.radius * self.radius).then_some(xi)
    }

    /// `F_0(r, z) = f_{r,z}(s, x; r, z)`.
    #[inline]
    fn leading_in(&self, g: &WindowGeometry, r: f64, z: State) -> f64 {
        g.density_w(self.core.field.sigma2(r, z), g.offset_w(self.x, z))
    }

    fn build_order(&self, k: usize, nodes: &[Vec<Node>]) -> Vec<SplineGrid> {
        let n = self.grid_points;
        let e = k as f64 * self.core.kappa;
        let field = &self.core.field;
        let rules = &self.core.rules;
        (0..self.times.len())
            .map(|j| {
                let t = self.times[j];
                let frame = self.frames[j];
                let combos: Vec<Option<SplineGrid>> = nodes[j]
                    .iter()
                    .map(|nd| if k == 1 { None } else { self.slices.combined(nd.r - self.s, &nd.frame, k - 2..k - 1) })
                    .collect();
                let scale = 2.0 * std::f64::consts::PI * frame.det_l / (t - self.s).powf(e);
                let values: Vec<f64> = (0..n * n)
                    .into_par_iter()
                    .map(|idx| {
                        let Some(xi) = self.grid_xi(idx) else { return 0.0 };
                        let y = frame.from_xi(xi);
                        let a_y = field.sigma2(t, y);
                        let mut total = 0.0;
                        for (nd, combo) in nodes[j].iter().zip(&combos) {
                            let rg = &nd.right;
                            let p_right = rg.inv1.scale(1.0 / a_y);
                            let m_right = rg.e_map(y);
                            let inner = |z: State, a_z: f64| delta0_parts(rg, field.mu(nd.r, z), a_z, z, y, a_y);
                            let mut acc = 0.0;
                            match combo {
                                None => {
                                    let mean = nd.src.e_inv(self.x);
                                    let p_left = nd.src_prec1.scale(1.0 / field.sigma2(nd.r, mean));
                                    let pn = ProductNodes::new(&rules.space, &rules.adjusted, p_left, mean, p_right, m_right);
                                    for (z, wt) in pn.iter() {
                                        let a_z = field.sigma2(nd.r, z);
                                        let lf = nd.src.density_w(a_z, nd.src.offset_w(self.x, z));
                                        acc += wt * lf * inner(z, a_z);
                                    }
                                }
                                Some(spline) => {
                                    let fr = &nd.frame;
                                    let pn =
                                        ProductNodes::new(&rules.space, &rules.adjusted, fr.precision(), fr.c, p_right, m_right);
                                    for (z, wt) in pn.iter() {
                                        let lf = eval_in(fr, spline, z);
                                        if lf != 0.0 {
                                            acc += wt * lf * inner(z, field.sigma2(nd.r, z));
                                        }
                                    }
                                }
                            }
                            total += nd.weight * acc;
                        }
                        total * scale * (0.5 * (xi[0] * xi[0] + xi[1] * xi[1])).exp()
                    })
                    .collect();
                SplineGrid::new(n, self.radius, &values)
            })
            .collect()
    }

    fn order_sup(&self, k: usize) -> f64 {
        let n = self.grid_points;
        let mut best = 0.0f64;
        for grid in &self.slices.orders[k - 1] {
            for idx in 0..n * n {
                if let Some(xi) = self.grid_xi(idx) {
                    best = best.max(4.0 * grid.eval(xi).abs() * (-0.375 * (xi[0] * xi[0] + xi[1] * xi[1])).exp());
                }
            }
        }
        best
    }

    fn check(&self, t: f64) -> Result<()> {
        if !(t > self.s && t <= self.t_end * (1.0 + 1e-12)) {
            return Err(Error::TimeOutOfRange { t, horizon: self.t_end });
        }
        Ok(())
    }

    fn correction_spline(&self, t: f64) -> Result<Option<(Frame, SplineGrid)>> {
        if self.order == 0 {
            return Ok(None);
        }
        let frame = self.frame_at(t)?;
        Ok(self.slices.combined(t - self.s, &frame, 0..self.order).map(|s| (frame, s)))
    }

    /// `f(s, x; t, y)` split as `(leading, correction)`.
    pub fn density_parts(&self, t: f64, y: State) -> Result<(f64, f64)> {
        self.check(t)?;
        let g = self.core.geometry(self.s, t)?;
        let lead = self.leading_in(&g, t, y);
        let corr = match self.correction_spline(t)? {
            None => 0.0,
            Some((frame, spline)) => eval_in(&frame, &spline, y),
        };
        Ok((lead, corr))
    }

    pub fn density(&self, t: f64, y: State) -> Result<f64> {
        let (a, b) = self.density_parts(t, y)?;
        Ok(a + b)
    }

    /// `∫ h(y) f(s, x; t, y) dy` by the trapezoid rule with step `1/8` on
    /// `[-7, 7]²` in the leading kernel's frame and on the slice grid's
    /// frame for the correction. The step resolves integrands up to about
    /// fifty times as concentrated as the leading kernel.
    pub fn integrate(&self, t: f64, h: impl Fn(State) -> f64 + Sync) -> Result<f64> {
        self.check(t)?;
        let field = &self.core.field;
        let g = self.core.geometry(self.s, t)?;
        let mean = g.e_inv(self.x);
        let frame = Frame::from_cov(mean, pushed_cov(g.sigma1.scale(field.sigma2(t, mean)), g.increment));
        let lead = trapezoid(&frame, |y| {
            let f = self.leading_in(&g, t, y);
            if f == 0.0 {
                0.0
            } else {
                f * h(y)
            }
        });
        let corr = match self.correction_spline(t)? {
            None => 0.0,
            Some((cf, spline)) => trapezoid(&cf, |y| {
                let v = eval_in(&cf, &spline, y);
                if v == 0.0 {
                    0.0
                } else {
                    v * h(y)
                }
            }),
        };
        Ok(lead + corr)
    }

    /// `∫ f(s, x; t, y) dy`.
    pub fn mass(&self, t: f64) -> Result<f64> {
        self.integrate(t, |_| 1.0)
    }

    /// Slice times, ascending to `t_end`.
    pub fn slice_times(&self) -> &[f64] {
        &self.times
    }
}

const TRAPEZOID_STEP: f64 = 0.125;
const TRAPEZOID_RADIUS: f64 = 7.0;

/// `∫ F(z) dz` over the disc of radius 7 in the frame's coordinates.
fn trapezoid(frame: &Frame, f: impl Fn(State) -> f64 + Sync) -> f64 {
    let m = (TRAPEZOID_RADIUS / TRAPEZOID_STEP).round() as i64;
    let rows: Vec<f64> = (-m..=m)
        .into_par_iter()
        .map(|i| {
            let a = i as f64 * TRAPEZOID_STEP;
            let mut row = 0.0;
            for j in -m..=m {
                let b = j as f64 * TRAPEZOID_STEP;
                if a * a + b * b <= TRAPEZOID_RADIUS * TRAPEZOID_RADIUS {
                    row += f(frame.from_xi([a, b]));
                }
            }
            row
        })
        .collect();
    rows.iter().sum::<f64>() * TRAPEZOID_STEP * TRAPEZOID_STEP * frame.det_l
}

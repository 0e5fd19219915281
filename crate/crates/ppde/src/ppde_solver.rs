//! Solution of the path-dependent equation on the reduced Markov state.
//!
//! A path `x` observed up to time `s` enters the solution only through
//! `(x(s), I_s(x))`, so every computation here runs on a [`ReducedState`].
//! Two independent constructions of `v` are provided:
//!
//! * [`solve_v`] integrates `ℓ` and `g` against the transition density of a
//!   forward [`DensityField`](crate::parametrix::DensityField);
//! * [`ValueSurface`] tabulates `v_Φ = ∫∫Φ ℓ + ∫Φ(·;T,·) g` by a backward
//!   Neumann series and rebuilds `v` from the frozen kernels,
//!   `v = ∫ f_{T,y} g + ∫∫ f_{r,z} (v_Φ + ℓ)`.
//!
//! Dupire derivatives are finite differences on any [`ValueFunction`]: the
//! vertical bump moves `x₁` only, the horizontal step moves along the frozen
//! path, `(s + h, x₁, x₂ + x₁ (A_{s+h} - A_s))`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::gamma;

use crate::bv_driver::BVDriver;
use crate::error::{Error, Result};
use crate::gaussian_kernel::{State, Sym2, WindowGeometry};
use crate::interp::SplineGrid;
use crate::parametrix::frame::{adjusted_weights, pushed_cov, Frame};
use crate::parametrix::table::{graded_gaps, SliceTable};
use crate::parametrix::{delta0_parts, Core, Parametrix};
use crate::path::GridPath;
use crate::quad::{NormalRule2, UnitLegendre};

/// Payoff values are clipped here before integration.
pub const PAYOFF_CLIP: f64 = 1.0686474581524463e13;

/// `(s, x(s), I_s(x))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReducedState {
    pub s: f64,
    pub x1: f64,
    pub x2: f64,
}

impl ReducedState {
    pub fn new(s: f64, x1: f64, x2: f64) -> Self {
        Self { s, x1, x2 }
    }

    /// Reads `x(s)` and `I_s(x) = ∫_0^s x dA` off a step path.
    pub fn from_path(driver: &BVDriver, path: &GridPath, s: f64) -> Result<Self> {
        let x2 = if s > 0.0 { driver.stieltjes_integral(path, 0.0, s)? } else { 0.0 };
        Ok(Self { s, x1: path.value_at(s), x2 })
    }

    pub fn point(&self) -> State {
        [self.x1, self.x2]
    }

    /// State reached by freezing the path over `[s, s + h]`.
    pub fn flow(&self, driver: &BVDriver, h: f64) -> Self {
        Self { s: self.s + h, x1: self.x1, x2: self.x2 + self.x1 * driver.increment(self.s, self.s + h) }
    }

    /// State after the vertical bump `x + y 1_{[s,T]}`.
    pub fn bump(&self, y: f64) -> Self {
        Self { x1: self.x1 + y, ..*self }
    }
}

#[derive(Default)]
struct ClipCounter(AtomicUsize);

impl ClipCounter {
    #[inline]
    fn clip(&self, v: f64) -> f64 {
        if v.abs() > PAYOFF_CLIP {
            self.0.fetch_add(1, Ordering::Relaxed);
            PAYOFF_CLIP.copysign(v)
        } else {
            v
        }
    }

    fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
}

/// Value of the solution with the pieces that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveValue {
    pub v: f64,
    pub running: f64,
    pub terminal: f64,
    pub order: usize,
    pub tail_estimate: f64,
    /// Number of payoff evaluations clipped at [`PAYOFF_CLIP`].
    pub clipped: usize,
}

/// `v(s, x) = ∫_s^T ∫ ℓ(t,y) f(s,x;t,y) dy dt + ∫ g(y) f(s,x;T,y) dy`.
pub fn solve_v(px: &Parametrix, state: ReducedState) -> Result<SolveValue> {
    let horizon = px.driver().horizon();
    if !(state.s < horizon) {
        return Err(Error::EmptyWindow { s: state.s, t: horizon });
    }
    let field = px.field();
    let df = px.density_field(state.s, state.point(), horizon)?;
    let clip = ClipCounter::default();
    let terminal = df.integrate(horizon, |y| clip.clip(field.g(y)))?;
    let running = if field.ell.is_zero() {
        0.0
    } else {
        let gl = UnitLegendre::new(12);
        let mut acc = 0.0;
        for (&u, &w) in gl.nodes.iter().zip(&gl.weights) {
            let t = state.s + (horizon - state.s) * u;
            acc += w * df.integrate(t, |y| clip.clip(field.ell(t, y)))?;
        }
        acc * (horizon - state.s)
    };
    Ok(SolveValue {
        v: running + terminal,
        running,
        terminal,
        order: df.order,
        tail_estimate: df.tail_estimate,
        clipped: clip.get(),
    })
}

/// Anything that can be evaluated as `v(s, x₁, x₂)`.
pub trait ValueFunction: Sync {
    fn value(&self, state: ReducedState) -> Result<f64>;
    fn horizon(&self) -> f64;
}

/// [`solve_v`] as a [`ValueFunction`].
pub struct ForwardValue<'a>(pub &'a Parametrix);

impl ValueFunction for ForwardValue<'_> {
    fn value(&self, state: ReducedState) -> Result<f64> {
        Ok(solve_v(self.0, state)?.v)
    }

    fn horizon(&self) -> f64 {
        self.0.driver().horizon()
    }
}

struct TimeNode {
    r: f64,
    weight: f64,
    g: WindowGeometry,
    prec1: Sym2,
}

/// Tabulated `v_Φ` covering the forward support of an anchor state, and the
/// reconstruction of `v` from it.
pub struct ValueSurface {
    core: Arc<Core>,
    pub anchor: ReducedState,
    pub horizon: f64,
    pub order: usize,
    /// `sup |v_Φ,k| / (T-r)^{(k+1)κ₀-1}` over the slice grids.
    pub sup_norms: Vec<f64>,
    pub tail_estimate: f64,
    pub converged: bool,
    times: Vec<f64>,
    frames: Vec<Frame>,
    slices: SliceTable,
    grid_points: usize,
    radius: f64,
    wide: NormalRule2,
    wide_adjusted: Vec<f64>,
    clip: ClipCounter,
}

impl std::fmt::Debug for ValueSurface {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ValueSurface")
            .field("anchor", &self.anchor)
            .field("order", &self.order)
            .field("sup_norms", &self.sup_norms)
            .field("tail_estimate", &self.tail_estimate)
            .finish()
    }
}

impl ValueSurface {
    pub fn build(px: &Parametrix, anchor: ReducedState) -> Result<Self> {
        let core = px.core().clone();
        let horizon = core.driver.horizon();
        if !(anchor.s < horizon) {
            return Err(Error::EmptyWindow { s: anchor.s, t: horizon });
        }
        let cfg = core.config;
        let gaps = graded_gaps(horizon - anchor.s, cfg.slices, cfg.min_gap);
        let times: Vec<f64> = gaps.iter().map(|g| horizon - g).collect();
        let wide = NormalRule2::new(cfg.space_nodes + 3);
        let wide_adjusted = adjusted_weights(&wide);
        let mut surf = Self {
            anchor,
            horizon,
            order: 0,
            sup_norms: Vec::new(),
            tail_estimate: 0.0,
            converged: true,
            frames: Vec::new(),
            slices: SliceTable::new(gaps),
            grid_points: cfg.grid_points,
            radius: cfg.radius,
            wide,
            wide_adjusted,
            clip: ClipCounter::default(),
            times,
            core,
        };
        let end_cov = surf.forward_cov(horizon)?;
        surf.frames = surf
            .times
            .iter()
            .map(|&r| surf.cover_frame(r, end_cov))
            .collect::<Result<_>>()?;
        if surf.core.field.has_exact_parametrix() {
            return Ok(surf);
        }
        let kappa = surf.core.kappa;
        let n = surf.grid_points;
        let nodes: Vec<Vec<TimeNode>> = surf
            .times
            .iter()
            .map(|&r| surf.time_nodes(r, horizon))
            .collect::<Result<_>>()?;
        let span_pow = (horizon - anchor.s).powf(kappa);
        let mut tail = f64::INFINITY;
        for k in 0..=cfg.k_max {
            let e = (k + 1) as f64 * kappa - 1.0;
            let grids: Vec<SplineGrid> = (0..surf.times.len())
                .map(|j| -> Result<SplineGrid> {
                    let r = surf.times[j];
                    let frame = surf.frames[j];
                    let scale = (horizon - r).powf(-e);
                    let prev: Vec<(Frame, Option<SplineGrid>)> = if k == 0 {
                        Vec::new()
                    } else {
                        nodes[j]
                            .iter()
                            .map(|nd| Ok((surf.frame_at(nd.r)?, surf.combo(nd.r, k - 1..k))))
                            .collect::<Result<_>>()?
                    };
                    let terminal = if k == 0 { Some(surf.core.geometry(r, horizon)?) } else { None };
                    let values: Vec<f64> = (0..n * n)
                        .into_par_iter()
                        .map(|idx| {
                            let Some(xi) = grid_xi(n, surf.radius, idx) else { return 0.0 };
                            let z = frame.from_xi(xi);
                            let v = if k == 0 {
                                surf.first_order(r, z, terminal.as_ref().unwrap(), &nodes[j])
                            } else {
                                surf.next_order(r, z, &nodes[j], &prev)
                            };
                            v * scale
                        })
                        .collect();
                    Ok(SplineGrid::new(n, surf.radius, &values))
                })
                .collect::<Result<_>>()?;
            let sup = grids
                .iter()
                .flat_map(|g| (0..n * n).filter_map(move |idx| grid_xi(n, surf.radius, idx).map(|xi| g.eval(xi).abs())))
                .fold(0.0, f64::max);
            surf.slices.push_order(e, grids);
            surf.order = k;
            surf.sup_norms.push(sup);
            if k == 0 {
                if sup == 0.0 {
                    tail = 0.0;
                    break;
                }
                continue;
            }
            let prev = surf.sup_norms[k - 1];
            if sup == 0.0 || prev == 0.0 {
                tail = 0.0;
                break;
            }
            let c = (sup / prev) * gamma((k + 1) as f64 * kappa) / (gamma(kappa) * gamma(k as f64 * kappa));
            let partial: f64 = surf.sup_norms.iter().enumerate().map(|(i, s)| s * span_pow.powi(i as i32)).sum();
            let mut term = sup * span_pow.powi(k as i32);
            let mut sum = 0.0;
            for i in k..k + 400 {
                term *= c * gamma(kappa) * span_pow * gamma((i + 1) as f64 * kappa) / gamma((i + 2) as f64 * kappa);
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
        surf.tail_estimate = tail;
        surf.converged = tail <= cfg.tolerance;
        Ok(surf)
    }

    fn forward_cov(&self, r: f64) -> Result<Sym2> {
        if r - self.anchor.s <= 1e-9 * self.horizon {
            return Ok(Sym2 { xx: 0.0, xy: 0.0, yy: 0.0 });
        }
        let g = self.core.geometry(self.anchor.s, r)?;
        Ok(pushed_cov(g.sigma1.scale(self.core.a_ref), g.increment))
    }

    /// Frame covering where paths from the anchor can be at time `r`.
    fn cover_frame(&self, r: f64, end_cov: Sym2) -> Result<Frame> {
        let b = self.core.field.mu(self.anchor.s, self.anchor.point());
        let tau = r - self.anchor.s;
        let (inc, off) = if tau > 1e-9 * self.horizon {
            let g = self.core.geometry(self.anchor.s, r)?;
            (g.increment, g.offset)
        } else {
            (0.0, 0.0)
        };
        let c = [self.anchor.x1 + b * tau, self.anchor.x2 + self.anchor.x1 * inc + b * tau * (inc - off)];
        let cov = self.forward_cov(r)?.scale(2.0).add(&end_cov.scale(0.1));
        Ok(Frame::from_cov(c, cov))
    }

    fn time_nodes(&self, s: f64, t: f64) -> Result<Vec<TimeNode>> {
        self.core
            .rules
            .time
            .nodes(s, t)
            .map(|(r, weight)| {
                let g = self.core.geometry(s, r)?;
                Ok(TimeNode { r, weight, prec1: pushed_cov(g.sigma1, g.increment).inverse(), g })
            })
            .collect()
    }

    fn combo(&self, r: f64, orders: std::ops::Range<usize>) -> Option<SplineGrid> {
        self.slices.combined_scaled(self.horizon - r, 1.0, orders)
    }

    /// Frame at time `r` for evaluation; slices are interpolated in the
    /// same coordinates they were built in.
    fn frame_at(&self, r: f64) -> Result<Frame> {
        self.cover_frame(r, self.forward_cov(self.horizon)?)
    }

    /// `∫ h(w) K(w) dw` with `K` the Gaussian frame `(prec, mean)`.
    #[inline]
    fn gauss(&self, rule: &NormalRule2, adjusted: &[f64], prec: Sym2, mean: State, mut h: impl FnMut(State) -> f64) -> f64 {
        let fr = Frame::from_cov(mean, prec.inverse());
        rule.nodes
            .iter()
            .zip(adjusted)
            .map(|(u, w)| w * fr.det_l * h(fr.from_xi(*u)))
            .sum()
    }

    /// `∫ Δ₀(r,z;T,y) g(y) dy + ∫_r^T ∫ Δ₀(r,z;t,y) ℓ(t,y) dy dt`.
    fn first_order(&self, r: f64, z: State, terminal: &WindowGeometry, nodes: &[TimeNode]) -> f64 {
        let field = &self.core.field;
        let mu_z = field.mu(r, z);
        let s2_z = field.sigma2(r, z);
        let term = |g: &WindowGeometry, prec1: Sym2, payoff: &dyn Fn(State) -> f64| {
            let mean = g.e_inv(z);
            let prec = prec1.scale(1.0 / field.sigma2(g.t, mean));
            self.gauss(&self.wide, &self.wide_adjusted, prec, mean, |y| {
                let a_y = field.sigma2(g.t, y);
                delta0_parts(g, mu_z, s2_z, z, y, a_y) * self.clip.clip(payoff(y))
            })
        };
        let mut acc = term(terminal, pushed_cov(terminal.sigma1, terminal.increment).inverse(), &|y| field.g(y));
        if !field.ell.is_zero() {
            for nd in nodes {
                acc += nd.weight * term(&nd.g, nd.prec1, &|y| field.ell(nd.r, y));
            }
        }
        acc
    }

    fn next_order(&self, r: f64, z: State, nodes: &[TimeNode], prev: &[(Frame, Option<SplineGrid>)]) -> f64 {
        let field = &self.core.field;
        let rules = &self.core.rules;
        let mu_z = field.mu(r, z);
        let s2_z = field.sigma2(r, z);
        let mut acc = 0.0;
        for (nd, (frame, spline)) in nodes.iter().zip(prev) {
            let Some(spline) = spline else { continue };
            let mean = nd.g.e_inv(z);
            let prec = nd.prec1.scale(1.0 / field.sigma2(nd.r, mean));
            acc += nd.weight
                * self.gauss(&rules.space, &rules.adjusted, prec, mean, |w| {
                    let a_w = field.sigma2(nd.r, w);
                    delta0_parts(&nd.g, mu_z, s2_z, z, w, a_w) * spline.eval(frame.to_xi(w))
                });
        }
        acc
    }

    /// `v_Φ(r, z)`.
    pub fn v_phi(&self, r: f64, z: State) -> Result<f64> {
        if !(r >= self.anchor.s && r < self.horizon) {
            return Err(Error::TimeOutOfRange { t: r, horizon: self.horizon });
        }
        Ok(match self.combo(r, 0..self.slices.orders.len()) {
            None => 0.0,
            Some(s) => s.eval(self.frame_at(r)?.to_xi(z)),
        })
    }

    /// Precomputes everything that depends on `s` only.
    pub fn evaluator(&self, s: f64) -> Result<SliceEvaluator<'_>> {
        if !(s >= self.anchor.s && s < self.horizon) {
            return Err(Error::TimeOutOfRange { t: s, horizon: self.horizon });
        }
        let terminal = self.core.geometry(s, self.horizon)?;
        let nodes = self.time_nodes(s, self.horizon)?;
        let inner = nodes
            .iter()
            .map(|nd| {
                let frame = self.frame_at(nd.r)?;
                Ok((frame, self.combo(nd.r, 0..self.slices.orders.len())))
            })
            .collect::<Result<_>>()?;
        Ok(SliceEvaluator {
            surface: self,
            terminal,
            terminal_prec1: pushed_cov(terminal.sigma1, terminal.increment).inverse(),
            nodes,
            inner,
        })
    }

    /// Number of payoff values clipped so far.
    pub fn clipped(&self) -> usize {
        self.clip.get()
    }
}

/// `v(s, ·)` and `∂_{x₁} v(s, ·)` at a fixed time.
pub struct SliceEvaluator<'a> {
    surface: &'a ValueSurface,
    terminal: WindowGeometry,
    terminal_prec1: Sym2,
    nodes: Vec<TimeNode>,
    inner: Vec<(Frame, Option<SplineGrid>)>,
}

impl SliceEvaluator<'_> {
    /// `(v, ∂_{x₁} v)` at `x`.
    pub fn value_dx(&self, x: State) -> (f64, f64) {
        let surf = self.surface;
        let field = &surf.core.field;
        let rules = &surf.core.rules;
        let kernel = |g: &WindowGeometry, w: State, a: f64| {
            let off = g.offset_w(x, w);
            let f = g.density_w(a, off);
            (f, -f * (g.inv1.xx * off[0] + g.inv1.xy * off[1]) / a)
        };
        let g = &self.terminal;
        let mean = g.e_inv(x);
        let prec = self.terminal_prec1.scale(1.0 / field.sigma2(g.t, mean));
        let (mut v, mut d) = (0.0, 0.0);
        {
            let fr = Frame::from_cov(mean, prec.inverse());
            for (u, w) in surf.wide.nodes.iter().zip(&surf.wide_adjusted) {
                let y = fr.from_xi(*u);
                let (f, fx) = kernel(g, y, field.sigma2(g.t, y));
                let h = surf.clip.clip(field.g(y)) * w * fr.det_l;
                v += f * h;
                d += fx * h;
            }
        }
        for (nd, (frame, spline)) in self.nodes.iter().zip(&self.inner) {
            let mean = nd.g.e_inv(x);
            let prec = nd.prec1.scale(1.0 / field.sigma2(nd.r, mean));
            let fr = Frame::from_cov(mean, prec.inverse());
            let ell_zero = field.ell.is_zero();
            for (u, w) in rules.space.nodes.iter().zip(&rules.adjusted) {
                let z = fr.from_xi(*u);
                let mut h = spline.as_ref().map_or(0.0, |s| s.eval(frame.to_xi(z)));
                if !ell_zero {
                    h += surf.clip.clip(field.ell(nd.r, z));
                }
                if h == 0.0 {
                    continue;
                }
                let (f, fx) = kernel(&nd.g, z, field.sigma2(nd.r, z));
                let wt = nd.weight * w * fr.det_l * h;
                v += f * wt;
                d += fx * wt;
            }
        }
        (v, d)
    }

    pub fn value(&self, x: State) -> f64 {
        self.value_dx(x).0
    }
}

impl ValueFunction for ValueSurface {
    fn value(&self, state: ReducedState) -> Result<f64> {
        Ok(self.evaluator(state.s)?.value(state.point()))
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }
}

fn grid_xi(n: usize, radius: f64, idx: usize) -> Option<State> {
    let h = 2.0 * radius / (n - 1) as f64;
    let xi = [-radius + h * (idx / n) as f64, -radius + h * (idx % n) as f64];
    (xi[0] * xi[0] + xi[1] * xi[1] <= radius * radius).then_some(xi)
}

/// Finite-difference step sizes. `None` picks the defaults
/// `ε = max(1e-4, 1e-2 √(T-s))` and `h = 1e-3 (T-s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DupireSteps {
    pub vertical: Option<f64>,
    pub horizontal: Option<f64>,
    pub richardson: bool,
    /// Absolute noise level assumed for one value evaluation.
    pub noise: f64,
}

impl Default for DupireSteps {
    fn default() -> Self {
        Self { vertical: None, horizontal: None, richardson: true, noise: 1e-12 }
    }
}

/// Horizontal and vertical derivatives at a reduced state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DupireDerivatives {
    pub v: f64,
    pub dt: f64,
    pub dx: f64,
    pub dxx: f64,
    pub eps: f64,
    pub h: f64,
}

pub fn dupire_derivatives(
    vf: &impl ValueFunction,
    driver: &BVDriver,
    state: ReducedState,
    steps: DupireSteps,
) -> Result<DupireDerivatives> {
    let horizon = vf.horizon();
    let rem = horizon - state.s;
    let eps = steps.vertical.unwrap_or((1e-2 * rem.sqrt()).max(1e-4));
    let h = steps.horizontal.unwrap_or(1e-3 * rem);
    if !(rem > h) {
        return Err(Error::EmptyWindow { s: state.s + h, t: horizon });
    }
    let floor = steps.noise.sqrt();
    if eps < floor {
        return Err(Error::StepUnderflow { step: eps, floor });
    }
    if h * 1e3 < steps.noise.max(1e-300) {
        return Err(Error::StepUnderflow { step: h, floor: steps.noise * 1e-3 });
    }
    let v0 = vf.value(state)?;
    let vertical = |e: f64| -> Result<(f64, f64)> {
        let up = vf.value(state.bump(e))?;
        let dn = vf.value(state.bump(-e))?;
        Ok(((up - dn) / (2.0 * e), (up - 2.0 * v0 + dn) / (e * e)))
    };
    let horizontal = |step: f64| -> Result<f64> { Ok((vf.value(state.flow(driver, step))? - v0) / step) };
    let (d1, d2) = vertical(eps)?;
    let t1 = horizontal(h)?;
    let (dx, dxx, dt) = if steps.richardson {
        let (e1, e2) = vertical(0.5 * eps)?;
        let th = horizontal(0.5 * h)?;
        ((4.0 * e1 - d1) / 3.0, (4.0 * e2 - d2) / 3.0, 2.0 * th - t1)
    } else {
        (d1, d2, t1)
    };
    Ok(DupireDerivatives { v: v0, dt, dx, dxx, eps, h })
}

/// `∂_t v + μ ∂_x v + ½σ² ∂²_x v + ℓ` with its terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualReport {
    pub state: ReducedState,
    pub derivatives: DupireDerivatives,
    pub residual: f64,
    /// `|∂_t v| + |μ ∂_x v| + |½σ² ∂²_x v| + |ℓ|`.
    pub magnitude: f64,
}

impl ResidualReport {
    /// `|residual| / (magnitude + 1)`.
    pub fn relative(&self) -> f64 {
        self.residual.abs() / (self.magnitude + 1.0)
    }
}

pub fn ppde_residual(
    vf: &impl ValueFunction,
    px: &Parametrix,
    state: ReducedState,
    steps: DupireSteps,
) -> Result<ResidualReport> {
    let d = dupire_derivatives(vf, px.driver(), state, steps)?;
    let field = px.field();
    let x = state.point();
    let terms = [
        d.dt,
        field.mu(state.s, x) * d.dx,
        0.5 * field.sigma2(state.s, x) * d.dxx,
        field.ell(state.s, x),
    ];
    Ok(ResidualReport {
        state,
        derivatives: d,
        residual: terms.iter().sum(),
        magnitude: terms.iter().map(|t| t.abs()).sum(),
    })
}

/// One rung of the terminal ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TerminalRung {
    pub s: f64,
    pub v: f64,
    pub target: f64,
    pub gap: f64,
}

/// `v(s_n, x) - g(x₁, x₂ + x₁ (A_T - A_{s_n}))` along `s_n ↗ T`.
pub fn terminal_limit(
    vf: &impl ValueFunction,
    px: &Parametrix,
    x: State,
    remaining: &[f64],
) -> Result<Vec<TerminalRung>> {
    let horizon = vf.horizon();
    let driver = px.driver();
    remaining
        .iter()
        .map(|&rem| {
            let s = horizon - rem;
            let v = vf.value(ReducedState::new(s, x[0], x[1]))?;
            let target = px.field().g([x[0], x[1] + x[0] * driver.increment(s, horizon)]);
            Ok(TerminalRung { s, v, target, gap: (v - target).abs() })
        })
        .collect()
}

/// Writes `s, x1, x2, v, dt_v, dx_v, dxx_v, residual`.
pub fn write_residual_csv<W: std::io::Write>(out: W, rows: &[ResidualReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["s", "x1", "x2", "v", "dt_v", "dx_v", "dxx_v", "residual"])?;
    for r in rows {
        let d = &r.derivatives;
        w.write_record(
            [r.state.s, r.state.x1, r.state.x2, d.v, d.dt, d.dx, d.dxx, r.residual].map(|v| format!("{v:.12e}")),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `s, v, target, gap`.
pub fn write_terminal_csv<W: std::io::Write>(out: W, rows: &[TerminalRung]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["s", "v", "target", "gap"])?;
    for r in rows {
        w.write_record([r.s, r.v, r.target, r.gap].map(|v| format!("{v:.12e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// `v` tabulated on a time grid: one cubic spline per time in the cover
/// frame of the surface, so value and `∂_{x₁}` derivative come from the
/// same interpolant. The last time must be the horizon, where `g` is used.
pub struct ValueGrid {
    pub times: Vec<f64>,
    frames: Vec<Frame>,
    splines: Vec<SplineGrid>,
    radius: f64,
    field: crate::coefficient_field::CoefficientField,
}

impl std::fmt::Debug for ValueGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ValueGrid").field("times", &self.times.len()).field("radius", &self.radius).finish()
    }
}

impl ValueGrid {
    pub fn build(surface: &ValueSurface, times: &[f64], grid_points: usize, radius: f64) -> Result<Self> {
        let horizon = surface.horizon;
        let ok = times.len() >= 2
            && times.windows(2).all(|w| w[1] > w[0])
            && times[0] >= surface.anchor.s
            && (times[times.len() - 1] - horizon).abs() < 1e-12;
        if !ok || grid_points < 4 || !(radius > 0.0) {
            return Err(Error::InvalidParameter("value grid needs increasing times ending at the horizon".into()));
        }
        let n = grid_points;
        let h = 2.0 * radius / (n - 1) as f64;
        let (frames, splines): (Vec<Frame>, Vec<SplineGrid>) = times[..times.len() - 1]
            .par_iter()
            .map(|&t| {
                let frame = surface.frame_at(t)?;
                let ev = surface.evaluator(t)?;
                let values: Vec<f64> = (0..n * n)
                    .map(|idx| {
                        let xi = [-radius + h * (idx / n) as f64, -radius + h * (idx % n) as f64];
                        ev.value(frame.from_xi(xi))
                    })
                    .collect();
                Ok((frame, SplineGrid::new(n, radius, &values)))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(Self { times: times.to_vec(), frames, splines, radius, field: surface.core.field.clone() })
    }

    /// `(v, ∂_{x₁} v, inside)` at time index `k`; `inside` is false when `x`
    /// lies beyond the tabulated square.
    pub fn value_dx(&self, k: usize, x: State) -> (f64, f64, bool) {
        if k + 1 >= self.times.len() {
            let e = 1e-5 * (1.0 + x[0].abs());
            let g = |y: f64| self.field.g([y, x[1]]).clamp(-PAYOFF_CLIP, PAYOFF_CLIP);
            return (g(x[0]), (g(x[0] + e) - g(x[0] - e)) / (2.0 * e), true);
        }
        let fr = &self.frames[k];
        let xi = fr.to_xi(x);
        let inside = xi[0].abs() <= self.radius && xi[1].abs() <= self.radius;
        let (v, d) = self.splines[k].eval_grad(xi);
        let dx1 = d[0] / fr.l[0] - d[1] * fr.l[1] / (fr.l[0] * fr.l[2]);
        (v, dx1, inside)
    }
}

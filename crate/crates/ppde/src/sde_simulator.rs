//! Monte Carlo simulation of the state equation
//! `dX = μ(t, X, I) dt + σ(t, X, I) dW`, `dI = X dA`.
//!
//! The running integral is updated with the exact increment of the driver,
//! `I_{k+1} = I_k + X_k (A_{t_{k+1}} - A_{t_k})`, which is the Stieltjes sum of
//! the Euler step path and stays correct for drivers that are not
//! absolutely continuous. Each path draws its normals from its own ChaCha
//! stream keyed by `(seed, path)`, so ensembles do not depend on the number
//! of threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bv_driver::BVDriver;
use crate::coefficient_field::CoefficientField;
use crate::error::{Error, Result};
use crate::gaussian_kernel::State;
use crate::ppde_solver::{ReducedState, ValueGrid, PAYOFF_CLIP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    EulerMaruyama,
}

/// Simulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub paths: usize,
    pub steps: usize,
    pub scheme: Scheme,
    pub seed: u64,
    pub initial: [f64; 3],
    pub antithetic: bool,
    /// Explicit time grid from the initial time to the horizon; overrides
    /// the uniform grid of `steps` steps.
    pub time_grid: Option<Vec<f64>>,
    /// Keep every path, not just the terminal states.
    pub record_paths: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            paths: 10_000,
            steps: 200,
            scheme: Scheme::EulerMaruyama,
            seed: 1,
            initial: [0.0, 0.0, 0.0],
            antithetic: false,
            time_grid: None,
            record_paths: false,
        }
    }
}

impl SimConfig {
    pub fn start(&self) -> ReducedState {
        ReducedState::new(self.initial[0], self.initial[1], self.initial[2])
    }

    fn validate(&self, driver: &BVDriver) -> Result<Vec<f64>> {
        if self.paths < 1 {
            return Err(Error::InvalidParameter("need at least one path".into()));
        }
        let s0 = self.initial[0];
        let horizon = driver.horizon();
        let grid = match &self.time_grid {
            Some(g) => {
                let ok = g.len() >= 3
                    && (g[0] - s0).abs() < 1e-12
                    && (g[g.len() - 1] - horizon).abs() < 1e-12
                    && g.windows(2).all(|w| w[1] > w[0]);
                if !ok {
                    return Err(Error::InvalidParameter(
                        "time grid must increase from the initial time to the horizon with at least two steps".into(),
                    ));
                }
                g.clone()
            }
            None => {
                if self.steps < 2 {
                    return Err(Error::InvalidParameter("need at least two time steps".into()));
                }
                if !(s0 < horizon && s0 >= 0.0) {
                    return Err(Error::EmptyWindow { s: s0, t: horizon });
                }
                (0..=self.steps).map(|k| s0 + (horizon - s0) * k as f64 / self.steps as f64).collect()
            }
        };
        Ok(grid)
    }
}

/// Standard normal increments for one path: antithetic partners share the
/// stream of their pair and flip the sign.
struct Normals {
    rng: ChaCha8Rng,
    sign: f64,
}

impl Normals {
    fn new(config: &SimConfig, path: usize) -> Self {
        let (stream, sign) = if config.antithetic { (path / 2, if path % 2 == 0 { 1.0 } else { -1.0 }) } else { (path, 1.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream as u64);
        Self { rng, sign }
    }

    #[inline]
    fn next(&mut self) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        self.sign * z
    }
}

/// One Euler step; returns the new state.
#[inline]
fn euler_step(field: &CoefficientField, t: f64, x: State, dt: f64, da: f64, dw: f64) -> State {
    [x[0] + field.mu(t, x) * dt + field.sigma(t, x) * dw, x[1] + x[0] * da]
}

/// Simulated ensemble.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ensemble {
    pub times: Vec<f64>,
    pub terminal: Vec<State>,
    /// `∫ ℓ dt` along each path by the trapezoid rule.
    pub running: Vec<f64>,
    /// Full paths when requested, `paths[p][k]` at `times[k]`.
    pub paths: Option<Vec<Vec<State>>>,
}

struct PathOut {
    terminal: State,
    running: f64,
    path: Option<Vec<State>>,
}

fn run_path(config: &SimConfig, field: &CoefficientField, driver: &BVDriver, grid: &[f64], p: usize) -> Result<PathOut> {
    let mut normals = Normals::new(config, p);
    let mut x = [config.initial[1], config.initial[2]];
    let mut path = config.record_paths.then(|| {
        let mut v = Vec::with_capacity(grid.len());
        v.push(x);
        v
    });
    let skip_ell = field.ell.is_zero();
    let mut running = 0.0;
    let mut ell_prev = if skip_ell { 0.0 } else { field.ell(grid[0], x) };
    for k in 0..grid.len() - 1 {
        let (t0, t1) = (grid[k], grid[k + 1]);
        let dt = t1 - t0;
        let dw = dt.sqrt() * normals.next();
        x = euler_step(field, t0, x, dt, driver.increment(t0, t1), dw);
        if !(x[0].is_finite() && x[1].is_finite()) {
            return Err(Error::NonFiniteState { path: p, step: k + 1 });
        }
        if !skip_ell {
            let ell = field.ell(t1, x);
            running += 0.5 * (ell_prev + ell) * dt;
            ell_prev = ell;
        }
        if let Some(v) = path.as_mut() {
            v.push(x);
        }
    }
    Ok(PathOut { terminal: x, running, path })
}

pub fn simulate(config: &SimConfig, field: &CoefficientField, driver: &BVDriver) -> Result<Ensemble> {
    let grid = config.validate(driver)?;
    let out: Vec<PathOut> = (0..config.paths)
        .into_par_iter()
        .map(|p| run_path(config, field, driver, &grid, p))
        .collect::<Result<_>>()?;
    let mut ens = Ensemble {
        times: grid,
        terminal: Vec::with_capacity(out.len()),
        running: Vec::with_capacity(out.len()),
        paths: config.record_paths.then(Vec::new),
    };
    for o in out {
        ens.terminal.push(o.terminal);
        ens.running.push(o.running);
        if let (Some(all), Some(p)) = (ens.paths.as_mut(), o.path) {
            all.push(p);
        }
    }
    Ok(ens)
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
    pub clipped: usize,
}

impl McEstimate {
    /// Mean and standard error of independent samples.
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        let n = xs.len();
        if n == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Ok(Self { mean, std_error: (var / n as f64).sqrt(), samples: n, clipped: 0 })
    }
}

/// Per-path payoffs `∫ℓ dt + g(X_T, I_T)`; antithetic pairs are averaged
/// so the returned samples are independent.
pub fn payoff_samples(config: &SimConfig, field: &CoefficientField, ens: &Ensemble) -> (Vec<f64>, usize) {
    let mut clipped = 0;
    let raw: Vec<f64> = ens
        .terminal
        .iter()
        .zip(&ens.running)
        .map(|(x, r)| {
            let g = field.g(*x);
            let g = if g.abs() > PAYOFF_CLIP {
                clipped += 1;
                PAYOFF_CLIP.copysign(g)
            } else {
                g
            };
            g + r
        })
        .collect();
    let samples = if config.antithetic {
        raw.chunks(2).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    } else {
        raw
    };
    (samples, clipped)
}

/// `E[∫_s^T ℓ(t, X_t, I_t) dt + g(X_T, I_T)]`.
pub fn feynman_kac(config: &SimConfig, field: &CoefficientField, driver: &BVDriver) -> Result<McEstimate> {
    let ens = simulate(config, field, driver)?;
    let (samples, clipped) = payoff_samples(config, field, &ens);
    Ok(McEstimate { clipped, ..McEstimate::from_samples(&samples)? })
}

/// Feynman-Kac estimates on `levels` uniform grids `M, 2M, 4M, …` driven by
/// the same Brownian paths (coarse increments are sums of fine ones), and
/// the differences between consecutive levels with their standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakConvergence {
    pub steps: Vec<usize>,
    pub estimates: Vec<McEstimate>,
    /// `E[P_{level+1} - P_level]` with standard errors.
    pub differences: Vec<McEstimate>,
}

impl WeakConvergence {
    /// `|d_2| / |d_1|` for the last two level differences.
    pub fn halving_ratio(&self) -> Option<f64> {
        let n = self.differences.len();
        (n >= 2).then(|| self.differences[n - 1].mean.abs() / self.differences[n - 2].mean.abs())
    }
}

pub fn weak_convergence(
    config: &SimConfig,
    field: &CoefficientField,
    driver: &BVDriver,
    levels: usize,
) -> Result<WeakConvergence> {
    if levels < 2 || config.time_grid.is_some() {
        return Err(Error::InvalidParameter("weak convergence needs two or more uniform levels".into()));
    }
    let base = config.steps;
    let finest = base << (levels - 1);
    let fine_cfg = SimConfig { steps: finest, antithetic: false, ..config.clone() };
    let grid = fine_cfg.validate(driver)?;
    let per_path: Vec<Vec<f64>> = (0..config.paths)
        .into_par_iter()
        .map(|p| -> Result<Vec<f64>> {
            let mut normals = Normals::new(&fine_cfg, p);
            let dw: Vec<f64> = (0..finest)
                .map(|k| (grid[k + 1] - grid[k]).sqrt() * normals.next())
                .collect();
            (0..levels)
                .map(|lvl| {
                    let stride = 1usize << (levels - 1 - lvl);
                    let mut x = [config.initial[1], config.initial[2]];
                    let mut running = 0.0;
                    let mut ell_prev = field.ell(grid[0], x);
                    for k in (0..finest).step_by(stride) {
                        let (t0, t1) = (grid[k], grid[k + stride]);
                        let w: f64 = dw[k..k + stride].iter().sum();
                        x = euler_step(field, t0, x, t1 - t0, driver.increment(t0, t1), w);
                        if !(x[0].is_finite() && x[1].is_finite()) {
                            return Err(Error::NonFiniteState { path: p, step: k });
                        }
                        let ell = field.ell(t1, x);
                        running += 0.5 * (ell_prev + ell) * (t1 - t0);
                        ell_prev = ell;
                    }
                    Ok(field.g(x).clamp(-PAYOFF_CLIP, PAYOFF_CLIP) + running)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let column = |f: &dyn Fn(&Vec<f64>) -> f64| -> Result<McEstimate> {
        McEstimate::from_samples(&per_path.iter().map(f).collect::<Vec<_>>())
    };
    let estimates = (0..levels).map(|l| column(&|v| v[l])).collect::<Result<Vec<_>>>()?;
    let differences = (0..levels - 1).map(|l| column(&|v| v[l + 1] - v[l])).collect::<Result<Vec<_>>>()?;
    Ok(WeakConvergence { steps: (0..levels).map(|l| base << l).collect(), estimates, differences })
}

/// Rectangular binning in `(y₁, y₂)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub y1: (f64, f64, usize),
    pub y2: (f64, f64, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bin {
    pub y1_lo: f64,
    pub y1_hi: f64,
    pub y2_lo: f64,
    pub y2_hi: f64,
    pub count: usize,
    pub mass: f64,
    pub std_error: f64,
    /// 95% Wilson score interval.
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bins: Vec<Bin>,
    pub samples: usize,
    /// Mass outside the binned rectangle.
    pub outside: f64,
}

impl Histogram {
    /// Binned mass plus the mass outside, which is one by construction.
    pub fn total_mass(&self) -> f64 {
        self.bins.iter().map(|b| b.mass).sum::<f64>() + self.outside
    }
}

pub fn empirical_density(terminal: &[State], binning: &Binning) -> Result<Histogram> {
    let n = terminal.len();
    if n == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let (a1, b1, n1) = binning.y1;
    let (a2, b2, n2) = binning.y2;
    if n1 == 0 || n2 == 0 || !(b1 > a1) || !(b2 > a2) {
        return Err(Error::InvalidParameter("empty binning".into()));
    }
    let mut counts = vec![0usize; n1 * n2];
    let mut outside = 0usize;
    for y in terminal {
        let i = ((y[0] - a1) / (b1 - a1) * n1 as f64).floor();
        let j = ((y[1] - a2) / (b2 - a2) * n2 as f64).floor();
        if i >= 0.0 && j >= 0.0 && (i as usize) < n1 && (j as usize) < n2 {
            counts[i as usize * n2 + j as usize] += 1;
        } else {
            outside += 1;
        }
    }
    let nf = n as f64;
    let z = 1.959963984540054;
    let bins = counts
        .iter()
        .enumerate()
        .map(|(idx, &c)| {
            let (i, j) = (idx / n2, idx % n2);
            let p = c as f64 / nf;
            let denom = 1.0 + z * z / nf;
            let centre = (p + z * z / (2.0 * nf)) / denom;
            let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
            Bin {
                y1_lo: a1 + (b1 - a1) * i as f64 / n1 as f64,
                y1_hi: a1 + (b1 - a1) * (i + 1) as f64 / n1 as f64,
                y2_lo: a2 + (b2 - a2) * j as f64 / n2 as f64,
                y2_hi: a2 + (b2 - a2) * (j + 1) as f64 / n2 as f64,
                count: c,
                mass: p,
                std_error: (p * (1.0 - p) / nf).sqrt(),
                ci_low: (centre - half).max(0.0),
                ci_high: (centre + half).min(1.0),
            }
        })
        .collect();
    Ok(Histogram { bins, samples: n, outside: outside as f64 / nf })
}

/// `v` and `∂_{x₁} v` at grid time index `k` (time `t`), with a flag that
/// is false when `x` falls outside the region the values are trusted on.
pub trait PathValue: Sync {
    fn value_dx(&self, k: usize, t: f64, x: State) -> (f64, f64, bool);
}

impl PathValue for ValueGrid {
    fn value_dx(&self, k: usize, _t: f64, x: State) -> (f64, f64, bool) {
        ValueGrid::value_dx(self, k, x)
    }
}

/// Outcome of the martingale test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub paths: usize,
    pub steps: usize,
    /// Mean of `Σ_k D_k` over paths on the fine grid.
    pub mean_sum: f64,
    pub mean_sum_std_error: f64,
    /// Pooled slope of `D_k` on `σ ∂_x v ΔW`, coarse and fine grids.
    pub slope_coarse: f64,
    pub slope_fine: f64,
    pub slope_fine_std_error: f64,
    /// `2 · fine - coarse`.
    pub slope_extrapolated: f64,
    pub slope_extrapolated_std_error: f64,
    /// Path states that fell outside the tabulated value grid.
    pub outside: usize,
}

impl MartingaleReport {
    pub fn mean_pass(&self) -> bool {
        self.mean_sum.abs() <= 3.0 * self.mean_sum_std_error
    }

    pub fn slope_pass(&self) -> bool {
        (self.slope_extrapolated - 1.0).abs() <= 3.0 * self.slope_extrapolated_std_error
    }
}

/// Increments `D_k = v(t_{k+1}, X_{k+1}) - v(t_k, X_k) + ℓ Δt` along Euler
/// paths on `config.steps` uniform steps (even) and on half as many steps
/// driven by the same noise. `value` must be tabulated on the fine grid
/// (`steps + 1` times).
pub fn martingale_check(
    config: &SimConfig,
    field: &CoefficientField,
    driver: &BVDriver,
    value: &impl PathValue,
    batches: usize,
) -> Result<MartingaleReport> {
    if config.time_grid.is_some() || config.antithetic {
        return Err(Error::InvalidParameter("martingale check uses a plain uniform grid".into()));
    }
    if config.steps % 2 != 0 {
        return Err(Error::InvalidParameter("martingale check needs an even number of steps".into()));
    }
    let m = config.steps / 2;
    let grid = config.validate(driver)?;
    let batches = batches.clamp(2, config.paths.max(2));
    #[derive(Default, Clone, Copy)]
    struct Acc {
        dz: [f64; 2],
        zz: [f64; 2],
        dd: [f64; 2],
        outside: usize,
    }
    let results: Vec<(f64, Acc)> = (0..config.paths)
        .into_par_iter()
        .map(|p| -> Result<(f64, Acc)> {
            let mut normals = Normals::new(config, p);
            let dw: Vec<f64> = (0..2 * m).map(|k| (grid[k + 1] - grid[k]).sqrt() * normals.next()).collect();
            let mut acc = Acc::default();
            let mut sum_fine = 0.0;
            for (lvl, stride) in [(0usize, 2usize), (1, 1)] {
                let mut x = [config.initial[1], config.initial[2]];
                let (mut v, mut vx, _) = value.value_dx(0, grid[0], x);
                let mut sum = 0.0;
                for k in (0..2 * m).step_by(stride) {
                    let (t0, t1) = (grid[k], grid[k + stride]);
                    let dt = t1 - t0;
                    let w: f64 = dw[k..k + stride].iter().sum();
                    let sig = field.sigma(t0, x);
                    let ell = field.ell(t0, x);
                    let nx = euler_step(field, t0, x, dt, driver.increment(t0, t1), w);
                    if !(nx[0].is_finite() && nx[1].is_finite()) {
                        return Err(Error::NonFiniteState { path: p, step: k });
                    }
                    let (nv, nvx) = if k + stride == 2 * m {
                        (field.g(nx).clamp(-PAYOFF_CLIP, PAYOFF_CLIP), 0.0)
                    } else {
                        let (nv, nvx, inside) = value.value_dx(k + stride, t1, nx);
                        acc.outside += usize::from(!inside);
                        (nv, nvx)
                    };
                    let d = nv - v + ell * dt;
                    let z = sig * vx * w;
                    acc.dz[lvl] += d * z;
                    acc.zz[lvl] += z * z;
                    acc.dd[lvl] += d * d;
                    sum += d;
                    x = nx;
                    v = nv;
                    vx = nvx;
                }
                if lvl == 1 {
                    sum_fine = sum;
                }
            }
            Ok((sum_fine, acc))
        })
        .collect::<Result<_>>()?;
    let sums: Vec<f64> = results.iter().map(|r| r.0).collect();
    let mean = McEstimate::from_samples(&sums)?;
    let per = config.paths.div_ceil(batches);
    let batch_acc: Vec<Acc> = results
        .chunks(per)
        .map(|c| {
            c.iter().fold(Acc::default(), |mut a, (_, b)| {
                for l in 0..2 {
                    a.dz[l] += b.dz[l];
                    a.zz[l] += b.zz[l];
                    a.dd[l] += b.dd[l];
                }
                a.outside += b.outside;
                a
            })
        })
        .collect();
    let total = batch_acc.iter().fold(Acc::default(), |mut a, b| {
        for l in 0..2 {
            a.dz[l] += b.dz[l];
            a.zz[l] += b.zz[l];
            a.dd[l] += b.dd[l];
        }
        a.outside += b.outside;
        a
    });
    let slope = |a: &Acc, l: usize| if a.zz[l] > 0.0 { a.dz[l] / a.zz[l] } else { 0.0 };
    let slopes_c = slope(&total, 0);
    let slopes_f = slope(&total, 1);
    let n_obs = (config.paths * 2 * m) as f64;
    let resid = (total.dd[1] - slopes_f * total.dz[1]).max(0.0) / (n_obs - 1.0).max(1.0);
    let se_f = (resid / total.zz[1].max(1e-300)).sqrt();
    let extrap: Vec<f64> = batch_acc.iter().map(|a| 2.0 * slope(a, 1) - slope(a, 0)).collect();
    let ex = McEstimate::from_samples(&extrap)?;
    Ok(MartingaleReport {
        paths: config.paths,
        steps: 2 * m,
        mean_sum: mean.mean,
        mean_sum_std_error: mean.std_error,
        slope_coarse: slopes_c,
        slope_fine: slopes_f,
        slope_fine_std_error: se_f,
        slope_extrapolated: 2.0 * slopes_f - slopes_c,
        slope_extrapolated_std_error: ex.std_error,
        outside: total.outside,
    })
}

/// Writes `x1, x2, running` for every path.
pub fn write_ensemble_csv<W: std::io::Write>(out: W, ens: &Ensemble) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x1", "x2", "running"])?;
    for (x, r) in ens.terminal.iter().zip(&ens.running) {
        w.write_record([x[0], x[1], *r].map(|v| format!("{v:.12e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `y1_lo, y1_hi, y2_lo, y2_hi, count, mass, ci_low, ci_high`.
pub fn write_histogram_csv<W: std::io::Write>(out: W, h: &Histogram) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["y1_lo", "y1_hi", "y2_lo", "y2_hi", "count", "mass", "ci_low", "ci_high"])?;
    for b in &h.bins {
        w.write_record([
            format!("{:.12e}", b.y1_lo),
            format!("{:.12e}", b.y1_hi),
            format!("{:.12e}", b.y2_lo),
            format!("{:.12e}", b.y2_hi),
            b.count.to_string(),
            format!("{:.12e}", b.mass),
            format!("{:.12e}", b.ci_low),
            format!("{:.12e}", b.ci_high),
        ])?;
    }
    w.flush()?;
    Ok(())
}

//! The parametrix series `Φ = Σ Δ_k`, the transition density built from it,
//! and its first derivative in the current path value.
//!
//! Every order `k ≥ 1` is a singular space-time convolution. The engine
//! tabulates orders on a ladder of time slices graded geometrically towards
//! the singular edge; each slice holds a cubic spline in the Gaussian frame
//! of the frozen kernel for that slice, so a table is smooth and bounded in
//! normalized coordinates even when the function itself concentrates.
//!
//! * [`ParametrixTable`] is anchored at a target `(t, y)` and stores
//!   `Δ_k(r, · ; t, y)` for `r < t`. Point values of `Φ`, `f` and `∂_{x₁}f`
//!   at any `(s, x)` are one further convolution against the table.
//! * [`DensityField`] is anchored at a source `(s, x)` and stores the
//!   forward pieces of `f(s, x; r, ·)` for `r > s`; it is what integrals over
//!   the target variable (normalization, Chapman-Kolmogorov, expectations)
//!   use.
//!
//! ```
//! use ppde::{BVDriver, CoefficientField, StateFn};
//! use ppde::parametrix::{Parametrix, ParametrixConfig};
//!
//! let driver = BVDriver::linear(1.0, 1.0).unwrap();
//! let field = CoefficientField::kolmogorov(StateFn::constant(0.0));
//! let px = Parametrix::new(driver, field, ParametrixConfig::default()).unwrap();
//! let f = px.density(0.0, [0.0, 0.0], 1.0, [0.0, 0.0]).unwrap();
//! assert!((f.value - 0.5513288954217921).abs() < 1e-12);
//! ```

mod backward;
mod forward;
pub(crate) mod frame;
pub(crate) mod table;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::bv_driver::BVDriver;
use crate::coefficient_field::{compute_admissibility, AdmissibilityReport, CoefficientField};
use crate::error::{Error, Result};
use crate::gaussian_kernel::{State, WindowGeometry};
use crate::quad::{NormalRule2, TimeRule};

pub use backward::{DensityValue, ParametrixTable, PhiValue, VolterraResidual};
pub use forward::DensityField;

use frame::{adjusted_weights, Frame};

/// Discretization and truncation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParametrixConfig {
    /// Grid points per axis of each slice table.
    pub grid_points: usize,
    /// Half-width of the slice grid in Mahalanobis units.
    pub radius: f64,
    /// Number of time slices per table.
    pub slices: usize,
    /// Smallest slice gap as a fraction of the table span.
    pub min_gap: f64,
    /// Gauss-Legendre nodes on each half of a substituted time window.
    pub time_nodes: usize,
    /// Gauss-Hermite nodes per axis for the space integrals.
    pub space_nodes: usize,
    /// Largest series order.
    pub k_max: usize,
    /// Relative tail target for truncating the series.
    pub tolerance: f64,
    /// Relative accuracy expected from the quadratures.
    pub quad_tolerance: f64,
}

impl Default for ParametrixConfig {
    fn default() -> Self {
        Self {
            grid_points: 33,
            radius: 6.5,
            slices: 24,
            min_gap: 1e-4,
            time_nodes: 8,
            space_nodes: 6,
            k_max: 8,
            tolerance: 1e-4,
            quad_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Rules {
    pub time: TimeRule,
    pub space: NormalRule2,
    pub adjusted: Vec<f64>,
}

impl Rules {
    fn new(time_nodes: usize, space_nodes: usize, kappa: f64) -> Self {
        let space = NormalRule2::new(space_nodes);
        let adjusted = adjusted_weights(&space);
        Self { time: TimeRule::new(time_nodes, kappa), space, adjusted }
    }
}

pub(crate) struct Core {
    pub driver: BVDriver,
    pub field: CoefficientField,
    pub config: ParametrixConfig,
    pub admissibility: AdmissibilityReport,
    pub kappa: f64,
    pub a_ref: f64,
    pub rules: Rules,
    pub fine: Rules,
    geometry: Mutex<HashMap<(u64, u64), WindowGeometry>>,
    tables: Mutex<HashMap<(u64, u64, u64), Arc<ParametrixTable>>>,
}

/// Parametrix engine for one driver and coefficient field. Cheap to clone;
/// clones share the geometry and table caches.
#[derive(Clone)]
pub struct Parametrix {
    core: Arc<Core>,
}

impl std::fmt::Debug for Parametrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parametrix")
            .field("driver", &self.core.driver)
            .field("config", &self.core.config)
            .field("kappa0", &self.core.kappa)
            .finish()
    }
}

impl Parametrix {
    pub fn new(driver: BVDriver, field: CoefficientField, config: ParametrixConfig) -> Result<Self> {
        if config.grid_points < 8 || config.slices < 4 || config.time_nodes < 2 || config.space_nodes < 2 {
            return Err(Error::InvalidParameter("parametrix discretization is too coarse".into()));
        }
        if !(config.min_gap > 0.0 && config.min_gap < 1.0) || !(config.radius > 2.0) {
            return Err(Error::InvalidParameter("min_gap must lie in (0, 1) and radius exceed 2".into()));
        }
        let driver = driver.ensure_exponents()?;
        let admissibility = compute_admissibility(&field, &driver)?;
        if !(admissibility.kappa0 > 0.0) {
            return Err(Error::Admissibility(format!("κ₀ = {} is not positive", admissibility.kappa0)));
        }
        let kappa = admissibility.kappa0.min(1.0);
        let rules = Rules::new(config.time_nodes, config.space_nodes, kappa);
        let fine = Rules::new(2 * config.time_nodes, config.space_nodes + 3, kappa);
        let a_ref = field.bounds.a_high;
        Ok(Self {
            core: Arc::new(Core {
                driver,
                field,
                config,
                admissibility,
                kappa,
                a_ref,
                rules,
                fine,
                geometry: Mutex::new(HashMap::new()),
                tables: Mutex::new(HashMap::new()),
            }),
        })
    }

    pub fn driver(&self) -> &BVDriver {
        &self.core.driver
    }

    pub fn field(&self) -> &CoefficientField {
        &self.core.field
    }

    pub fn config(&self) -> &ParametrixConfig {
        &self.core.config
    }

    pub fn admissibility(&self) -> &AdmissibilityReport {
        &self.core.admissibility
    }

    /// `κ₀` used for the time substitution and the table scalings.
    pub fn kappa0(&self) -> f64 {
        self.core.kappa
    }

    /// `Δ₀(s, x; t, y)` in closed form.
    pub fn delta0(&self, s: f64, x: State, t: f64, y: State) -> Result<f64> {
        let g = self.core.geometry(s, t)?;
        Ok(crate::gaussian_kernel::delta0_in(&g, &self.core.field, x, y))
    }

    /// Backward table for the target `(t, y)`, covering `r ∈ [0, t)`. Built
    /// once and cached.
    pub fn table(&self, t: f64, y: State) -> Result<Arc<ParametrixTable>> {
        let key = (t.to_bits(), y[0].to_bits(), y[1].to_bits());
        if let Some(tab) = self.core.tables.lock().unwrap().get(&key) {
            return Ok(tab.clone());
        }
        let tab = Arc::new(ParametrixTable::build(self.core.clone(), t, y)?);
        self.core.tables.lock().unwrap().insert(key, tab.clone());
        Ok(tab)
    }

    /// `Δ_k(s, x; t, y)`.
    pub fn delta_k(&self, k: usize, s: f64, x: State, t: f64, y: State) -> Result<f64> {
        if k == 0 {
            return self.delta0(s, x, t, y);
        }
        self.table(t, y)?.delta_k(k, s, x)
    }

    /// `Φ(s, x; t, y)` summed to the table's truncation order.
    pub fn phi(&self, s: f64, x: State, t: f64, y: State) -> Result<PhiValue> {
        self.table(t, y)?.phi(s, x)
    }

    /// Transition density `f(s, x; t, y)`.
    pub fn density(&self, s: f64, x: State, t: f64, y: State) -> Result<DensityValue> {
        self.table(t, y)?.density(s, x)
    }

    /// `∂_{x₁} f(s, x; t, y)`.
    pub fn density_dx1(&self, s: f64, x: State, t: f64, y: State) -> Result<f64> {
        self.table(t, y)?.density_dx1(s, x)
    }

    /// `Φ - Δ₀ - ∫∫Δ₀Φ` at `(s, x)`, the integral taken with a finer rule
    /// than the one used to build the table.
    pub fn volterra_residual(&self, s: f64, x: State, t: f64, y: State) -> Result<VolterraResidual> {
        self.table(t, y)?.volterra_residual(s, x)
    }

    /// Forward density field of the source `(s, x)` up to `t_end`.
    pub fn density_field(&self, s: f64, x: State, t_end: f64) -> Result<DensityField> {
        DensityField::build(self.core.clone(), s, x, t_end)
    }

    pub(crate) fn core(&self) -> &Arc<Core> {
        &self.core
    }
}

/// One row of a parametrix probe dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Probe {
    pub s: f64,
    pub x1: f64,
    pub x2: f64,
    pub t: f64,
    pub y1: f64,
    pub y2: f64,
    pub f_leading: f64,
    pub f_correction: f64,
    pub f: f64,
    pub dx1_f: f64,
    pub phi: f64,
    #[serde(rename = "K_used")]
    pub k_used: usize,
    pub tail_estimate: f64,
}

impl Parametrix {
    /// Density, its `x₁` derivative and `Φ` at one `(s, x; t, y)`.
    pub fn probe(&self, s: f64, x: State, t: f64, y: State) -> Result<Probe> {
        let table = self.table(t, y)?;
        let f = table.density(s, x)?;
        let phi = table.phi(s, x)?;
        Ok(Probe {
            s,
            x1: x[0],
            x2: x[1],
            t,
            y1: y[0],
            y2: y[1],
            f_leading: f.leading,
            f_correction: f.correction,
            f: f.value,
            dx1_f: table.density_dx1(s, x)?,
            phi: phi.value,
            k_used: table.order,
            tail_estimate: table.tail_estimate,
        })
    }
}

/// Writes probes as CSV with a header row.
pub fn write_probes_csv<W: std::io::Write>(out: W, rows: &[Probe]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl Core {
    pub fn geometry(&self, s: f64, t: f64) -> Result<WindowGeometry> {
        let key = (s.to_bits(), t.to_bits());
        if let Some(g) = self.geometry.lock().unwrap().get(&key) {
            return Ok(*g);
        }
        let g = WindowGeometry::new(&self.driver, s, t)?;
        self.geometry.lock().unwrap().insert(key, g);
        Ok(g)
    }

    /// Backward slice frame `c = E_{r,t}(y)`, `Σ_{r,t}(a_ref)`.
    pub fn backward_frame(&self, g: &WindowGeometry, y: State) -> Frame {
        Frame::from_cov(g.e_map(y), g.sigma1.scale(self.a_ref))
    }
}

/// `Δ₀(s, x; r, w)` with the source-side coefficients precomputed and the
/// frozen variance `a_w = σ²_r(w)`.
#[inline]
pub(crate) fn delta0_parts(g: &WindowGeometry, mu_x: f64, s2_x: f64, x: State, w: State, a_w: f64) -> f64 {
    let off = g.offset_w(x, w);
    let p0 = (g.inv1.xx * off[0] + g.inv1.xy * off[1]) / a_w;
    let f = g.density_w(a_w, off);
    f * (-mu_x * p0 + 0.5 * (s2_x - a_w) * (p0 * p0 - g.inv1.xx / a_w))
}

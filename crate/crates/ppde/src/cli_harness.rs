//! Experiment orchestration behind the `ppde` binary.
//!
//! An experiment is one TOML file:
//!
//! ```toml
//! seed = 7
//! out = "out"
//!
//! [driver]
//! kind = "power"          # absolutely-continuous | power | holder-pair | tabulated
//! gamma = 0.5
//! horizon = 1.0
//!
//! [coefficients]
//! mu = { type = "constant", value = 0.2 }
//! sigma = { type = "sine", base = 1.0, amplitude = 0.1 }
//!
//! [payoff]
//! ell = { type = "constant", value = 0.0 }
//! g = { type = "exp-capped", component = 2, cap = 5.0 }
//!
//! [probes]
//! s = [0.0]
//! x1 = [0.0]
//! x2 = [0.0]
//! t = [1.0]
//! y1 = [-0.5, 0.0, 0.5]
//! y2 = [0.0]
//! ```
//!
//! Every block except `driver` has defaults. [`run`] executes one
//! subcommand and writes its CSV (and optionally SVG) artifacts; the
//! returned [`Outcome`] carries the process exit status.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bv_driver::{BVDriver, DriverKind};
use crate::coefficient_field::{
    compute_admissibility, probe_hypotheses_with, AdmissibilityReport, Bounds, CoefficientField, HolderConstants,
    ProbeOptions, StateFn,
};
use crate::error::{Error, Result};
use crate::parametrix::{write_probes_csv, Parametrix, ParametrixConfig};
use crate::ppde_solver::{
    ppde_residual, solve_v, terminal_limit, write_terminal_csv, DupireSteps, ReducedState, ValueSurface,
};
use crate::sde_simulator::{
    empirical_density, feynman_kac, payoff_samples, simulate, weak_convergence, write_ensemble_csv,
    write_histogram_csv, Binning, McEstimate, SimConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverBlock {
    #[serde(flatten)]
    pub kind: DriverKind,
    pub horizon: f64,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Declared `β₀..β₄`; estimated from the path when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponents: Option<[f64; 5]>,
}

fn default_resolution() -> usize {
    1024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoefficientBlock {
    pub mu: StateFn,
    pub sigma: StateFn,
    pub holder: HolderConstants,
    /// Required when `σ` or `μ` bounds cannot be read off the builtin.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
}

impl Default for CoefficientBlock {
    fn default() -> Self {
        Self { mu: StateFn::constant(0.0), sigma: StateFn::constant(1.0), holder: HolderConstants::default(), bounds: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PayoffBlock {
    pub ell: StateFn,
    pub g: StateFn,
}

impl Default for PayoffBlock {
    fn default() -> Self {
        Self { ell: StateFn::constant(0.0), g: StateFn::linear(0.0, 1.0, 0.0) }
    }
}

/// Cartesian lattice of `(s, x₁, x₂; t, y₁, y₂)` probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeLattice {
    pub s: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub t: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
}

impl Default for ProbeLattice {
    fn default() -> Self {
        Self { s: vec![0.0], x1: vec![0.0], x2: vec![0.0], t: vec![1.0], y1: vec![-0.5, 0.0, 0.5], y2: vec![0.0] }
    }
}

impl ProbeLattice {
    pub fn sources(&self) -> Vec<(f64, [f64; 2])> {
        let mut out = Vec::new();
        for &s in &self.s {
            for &a in &self.x1 {
                for &b in &self.x2 {
                    out.push((s, [a, b]));
                }
            }
        }
        out
    }

    pub fn targets(&self) -> Vec<(f64, [f64; 2])> {
        let mut out = Vec::new();
        for &t in &self.t {
            for &a in &self.y1 {
                for &b in &self.y2 {
                    out.push((t, [a, b]));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveBlock {
    /// Reduced states `[s, x₁, x₂]` at which `v` and its derivatives are reported.
    pub states: Vec<[f64; 3]>,
    pub steps: DupireSteps,
    /// Remaining times `T - s` of the terminal ladder.
    pub terminal_ladder: Vec<f64>,
}

impl Default for SolveBlock {
    fn default() -> Self {
        Self { states: vec![[0.0, 0.0, 0.0]], steps: DupireSteps::default(), terminal_ladder: vec![0.1, 0.03, 0.01] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationBlock {
    #[serde(flatten)]
    pub sim: SimConfig,
    pub binning: Binning,
    /// Number of coupled levels for the weak-convergence study; 0 skips it.
    pub levels: usize,
}

impl Default for SimulationBlock {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            binning: Binning { y1: (-4.0, 4.0, 32), y2: (-4.0, 4.0, 32) },
            levels: 0,
        }
    }
}

/// Tolerances of the `validate` subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidateBlock {
    pub normalization: f64,
    pub chapman_kolmogorov: f64,
    /// Multiple of the Monte Carlo standard error.
    pub mc_sigmas: f64,
    pub residual: f64,
    /// Multiple of the quadrature tolerance.
    pub volterra_factor: f64,
}

impl Default for ValidateBlock {
    fn default() -> Self {
        Self { normalization: 1e-2, chapman_kolmogorov: 2e-2, mc_sigmas: 3.0, residual: 5e-2, volterra_factor: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotBlock {
    pub svg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub driver: DriverBlock,
    #[serde(default)]
    pub coefficients: CoefficientBlock,
    #[serde(default)]
    pub payoff: PayoffBlock,
    #[serde(default)]
    pub probes: ProbeLattice,
    #[serde(default)]
    pub parametrix: ParametrixConfig,
    #[serde(default)]
    pub solve: SolveBlock,
    #[serde(default)]
    pub simulation: SimulationBlock,
    #[serde(default)]
    pub validate: ValidateBlock,
    #[serde(default)]
    pub plots: PlotBlock,
}

fn default_seed() -> u64 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Parses and validates a TOML document. Errors name the line and the
    /// offending field.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Tolerances positive, lattice and states non-empty.
    pub fn check(&self) -> Result<()> {
        let p = &self.parametrix;
        let v = &self.validate;
        let positive = [
            ("parametrix.tolerance", p.tolerance),
            ("parametrix.quad_tolerance", p.quad_tolerance),
            ("validate.normalization", v.normalization),
            ("validate.chapman_kolmogorov", v.chapman_kolmogorov),
            ("validate.mc_sigmas", v.mc_sigmas),
            ("validate.residual", v.residual),
            ("validate.volterra_factor", v.volterra_factor),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {value}")));
            }
        }
        if self.probes.sources().is_empty() || self.probes.targets().is_empty() {
            return Err(Error::Config("probes: every lattice axis needs at least one value".into()));
        }
        if !(self.driver.horizon > 0.0) {
            return Err(Error::Config(format!("driver.horizon must be positive, got {}", self.driver.horizon)));
        }
        Ok(())
    }

    pub fn build_driver(&self) -> Result<BVDriver> {
        let d = BVDriver::new(self.driver.kind.clone(), self.driver.horizon, self.driver.resolution)?;
        match self.driver.exponents {
            Some(beta) => d.with_exponents(beta),
            None => d.ensure_exponents(),
        }
    }

    pub fn build_field(&self) -> Result<CoefficientField> {
        let c = &self.coefficients;
        let (ell, g) = (self.payoff.ell.clone(), self.payoff.g.clone());
        match c.bounds {
            Some(b) => CoefficientField::with_bounds(c.mu.clone(), c.sigma.clone(), ell, g, b, c.holder),
            None => CoefficientField::new(c.mu.clone(), c.sigma.clone(), ell, g, c.holder),
        }
    }

    fn sim_config(&self) -> SimConfig {
        SimConfig { seed: self.seed, ..self.simulation.sim.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Check,
    Density,
    Solve,
    Simulate,
    Validate,
}

impl std::str::FromStr for Subcommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "check" => Self::Check,
            "density" => Self::Density,
            "solve" => Self::Solve,
            "simulate" => Self::Simulate,
            "validate" => Self::Validate,
            other => return Err(Error::Config(format!("unknown subcommand `{other}`"))),
        })
    }
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success = 0,
    CheckFailure = 1,
    ConfigError = 2,
    NonConvergence = 3,
}

impl Status {
    pub fn code(self) -> i32 {
        self as i32
    }

    /// Status for a failed run.
    pub fn from_error(e: &Error) -> Self {
        match e {
            Error::Config(_)
            | Error::InvalidParameter(_)
            | Error::EmptyWindow { .. }
            | Error::WindowTooShort { .. }
            | Error::TimeOutOfRange { .. }
            | Error::PathCoverage { .. }
            | Error::Io(_) => Self::ConfigError,
            Error::NonConvergence { .. } | Error::NonFiniteState { .. } | Error::StepUnderflow { .. } => {
                Self::NonConvergence
            }
            _ => Self::CheckFailure,
        }
    }
}

/// What a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub status: Status,
    pub artifacts: Vec<PathBuf>,
    /// Human-readable report, one line per item.
    pub report: Vec<String>,
    pub warnings: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self { status: Status::Success, artifacts: Vec::new(), report: Vec::new(), warnings: Vec::new() }
    }

    fn create(&mut self, dir: &Path, name: &str) -> Result<BufWriter<File>> {
        let path = dir.join(name);
        let f = File::create(&path)?;
        self.artifacts.push(path);
        Ok(BufWriter::new(f))
    }

    fn write_text(&mut self, dir: &Path, name: &str, text: &str) -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text)?;
        self.artifacts.push(path);
        Ok(())
    }
}

/// Runs one subcommand, writing artifacts under `out`.
pub fn run(cmd: Subcommand, config: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    config.check()?;
    std::fs::create_dir_all(out)?;
    let mut o = Outcome::new();
    match cmd {
        Subcommand::Check => run_check(config, out, &mut o)?,
        Subcommand::Density => run_density(config, out, &mut o)?,
        Subcommand::Solve => run_solve(config, out, &mut o)?,
        Subcommand::Simulate => run_simulate(config, out, &mut o)?,
        Subcommand::Validate => run_validate(config, out, &mut o)?,
    }
    Ok(o)
}

fn admissibility_rows(r: &AdmissibilityReport) -> Vec<(String, f64)> {
    let mut rows: Vec<(String, f64)> = (0..5).map(|i| (format!("beta{i}"), r.beta[i])).collect();
    rows.extend([
        ("beta1_prime".to_string(), r.beta1_prime),
        ("beta2_prime".to_string(), r.beta2_prime),
        ("kappa0".to_string(), r.kappa0),
        ("kappa1".to_string(), r.kappa1),
        ("delta_beta_hat".to_string(), r.delta_beta_hat),
        ("alpha_hat_phi".to_string(), r.alpha_hat_phi),
        ("alpha_phi_upper".to_string(), r.alpha_phi_interval.1),
        ("alpha_phi".to_string(), r.alpha_phi),
        ("kappa_phi".to_string(), r.kappa_phi),
        ("kappa_ell".to_string(), r.kappa_ell),
        ("density_defined".to_string(), f64::from(u8::from(r.density_defined))),
        ("first_derivative".to_string(), f64::from(u8::from(r.first_derivative))),
        ("classical_solution".to_string(), f64::from(u8::from(r.classical_solution))),
        ("uniqueness_condition".to_string(), f64::from(u8::from(r.uniqueness_condition))),
        ("uniqueness_lhs".to_string(), r.uniqueness_lhs),
        ("uniqueness_rhs".to_string(), r.uniqueness_rhs),
    ]);
    rows
}

/// Violated inequalities, named.
fn admissibility_warnings(r: &AdmissibilityReport) -> Vec<String> {
    let mut w = Vec::new();
    if !(r.kappa0 > 0.0) {
        w.push(format!("κ₀ = {:.6} violates κ₀ > 0", r.kappa0));
    }
    if !(r.kappa1 > 0.0) {
        w.push(format!("κ₁ = {:.6} violates κ₁ > 0", r.kappa1));
    }
    if !(r.alpha_phi_interval.1 > 0.0) {
        w.push(format!("upper end {:.6} of the α_Φ interval violates > 0", r.alpha_phi_interval.1));
    }
    if !r.classical_solution && r.alpha_phi_interval.1 > 0.0 && r.kappa1 > 0.0 {
        w.push(format!("κ_Φ = {:.6}, κ_ℓ = {:.6}: joint exponent is not positive", r.kappa_phi, r.kappa_ell));
    }
    if !r.uniqueness_condition {
        w.push(format!(
            "uniqueness needs a monotone driver and 0 < {:.6} < {:.6}",
            r.uniqueness_lhs, r.uniqueness_rhs
        ));
    }
    w
}

fn run_check(config: &ExperimentConfig, out: &Path, o: &mut Outcome) -> Result<()> {
    let driver = config.build_driver()?;
    let field = config.build_field()?;
    let report = compute_admissibility(&field, &driver)?;
    let mut w = csv::Writer::from_writer(o.create(out, "admissibility.csv")?);
    w.write_record(["quantity", "value"])?;
    for (k, v) in admissibility_rows(&report) {
        o.report.push(format!("{k} = {v:.6}"));
        w.write_record([k, format!("{v:.12e}")])?;
    }
    w.flush()?;
    let opts = ProbeOptions { seed: config.seed, ..ProbeOptions::default() };
    let hyp = probe_hypotheses_with(&field, &driver, 2000, opts)?;
    let mut w = csv::Writer::from_writer(o.create(out, "hypotheses.csv")?);
    w.write_record(["check", "declared_constant", "worst_ratio", "pass"])?;
    for c in &hyp.checks {
        o.report.push(format!(
            "{}: worst ratio {:.4} against {:.4} {}",
            c.name,
            c.worst_ratio,
            c.declared_constant,
            pass_word(c.pass)
        ));
        w.write_record([
            c.name.clone(),
            format!("{:.12e}", c.declared_constant),
            format!("{:.12e}", c.worst_ratio),
            c.pass.to_string(),
        ])?;
    }
    w.flush()?;
    let mut unchecked: Vec<&String> = hyp.not_checkable.iter().chain(&report.not_checkable).collect();
    unchecked.sort();
    unchecked.dedup();
    for n in unchecked {
        o.report.push(format!("not checkable: {n}"));
    }
    o.warnings.extend(admissibility_warnings(&report));
    if !hyp.passes() || !report.density_defined {
        o.status = Status::CheckFailure;
    }
    Ok(())
}

fn parametrix(config: &ExperimentConfig, o: &mut Outcome) -> Result<Parametrix> {
    let driver = config.build_driver()?;
    let field = config.build_field()?;
    let report = compute_admissibility(&field, &driver)?;
    o.warnings.extend(admissibility_warnings(&report));
    Parametrix::new(driver, field, config.parametrix)
}

fn run_density(config: &ExperimentConfig, out: &Path, o: &mut Outcome) -> Result<()> {
    let px = parametrix(config, o)?;
    let sources = config.probes.sources();
    let targets = config.probes.targets();
    for &(s, _) in &sources {
        for &(t, _) in &targets {
            if !(s < t) {
                return Err(Error::EmptyWindow { s, t });
            }
        }
    }
    let mut rows = Vec::with_capacity(sources.len() * targets.len());
    for &(t, y) in &targets {
        for &(s, x) in &sources {
            rows.push(px.probe(s, x, t, y)?);
        }
    }
    write_probes_csv(o.create(out, "density.csv")?, &rows)?;
    for &(t, y) in &targets {
        let tab = px.table(t, y)?;
        if !tab.converged {
            o.status = Status::NonConvergence;
            o.warnings.push(format!(
                "series at t = {t}, y = {y:?} stopped at order {} with tail {:.3e}",
                tab.order, tab.tail_estimate
            ));
        }
    }
    o.report.push(format!("{} probes", rows.len()));
    if config.plots.svg {
        let (s0, x0) = sources[0];
        let series: Vec<(f64, f64)> =
            rows.iter().filter(|r| r.s == s0 && [r.x1, r.x2] == x0).map(|r| (r.y1, r.f)).collect();
        o.write_text(out, "density.svg", &line_svg("f along the probe lattice", "y1", "f", &series))?;
    }
    Ok(())
}

fn run_solve(config: &ExperimentConfig, out: &Path, o: &mut Outcome) -> Result<()> {
    let px = parametrix(config, o)?;
    let mut w = csv::Writer::from_writer(o.create(out, "solve.csv")?);
    w.write_record([
        "s", "x1", "x2", "v_forward", "v_resolvent", "dt_v", "dx_v", "dxx_v", "residual", "relative", "K_used",
        "tail_estimate",
    ])?;
    let mut ladder = Vec::new();
    for st in &config.solve.states {
        let state = ReducedState::new(st[0], st[1], st[2]);
        let fwd = solve_v(&px, state)?;
        let surf = ValueSurface::build(&px, state)?;
        let res = ppde_residual(&surf, &px, state, config.solve.steps)?;
        let d = &res.derivatives;
        if !surf.converged {
            o.status = Status::NonConvergence;
        }
        o.report.push(format!(
            "v({:.3}, {:.3}, {:.3}) = {:.8} (resolvent {:.8}), residual {:.3e}",
            state.s,
            state.x1,
            state.x2,
            fwd.v,
            d.v,
            res.residual
        ));
        let mut rec: Vec<String> = [st[0], st[1], st[2], fwd.v, d.v, d.dt, d.dx, d.dxx, res.residual, res.relative()]
            .iter()
            .map(|v| format!("{v:.12e}"))
            .collect();
        rec.push(fwd.order.to_string());
        rec.push(format!("{:.12e}", fwd.tail_estimate));
        w.write_record(&rec)?;
        if ladder.is_empty() && !config.solve.terminal_ladder.is_empty() {
            ladder = terminal_limit(&surf, &px, state.point(), &config.solve.terminal_ladder)?;
        }
    }
    w.flush()?;
    if !ladder.is_empty() {
        write_terminal_csv(o.create(out, "terminal.csv")?, &ladder)?;
        if config.plots.svg {
            let series: Vec<(f64, f64)> = ladder.iter().map(|r| (r.s, r.gap)).collect();
            o.write_text(out, "terminal.svg", &line_svg("terminal gap", "s", "|v - g|", &series))?;
        }
    }
    Ok(())
}

fn write_estimate(w: &mut csv::Writer<BufWriter<File>>, name: &str, e: &McEstimate) -> Result<()> {
    w.write_record([
        name.to_string(),
        format!("{:.12e}", e.mean),
        format!("{:.12e}", e.std_error),
        e.samples.to_string(),
        e.clipped.to_string(),
    ])?;
    Ok(())
}

fn run_simulate(config: &ExperimentConfig, out: &Path, o: &mut Outcome) -> Result<()> {
    let driver = config.build_driver()?;
    let field = config.build_field()?;
    let sim = config.sim_config();
    let ens = simulate(&sim, &field, &driver)?;
    write_ensemble_csv(o.create(out, "ensemble.csv")?, &ens)?;
    let (samples, clipped) = payoff_samples(&sim, &field, &ens);
    let fk = McEstimate { clipped, ..McEstimate::from_samples(&samples)? };
    let hist = empirical_density(&ens.terminal, &config.simulation.binning)?;
    write_histogram_csv(o.create(out, "histogram.csv")?, &hist)?;
    let mut w = csv::Writer::from_writer(o.create(out, "feynman_kac.csv")?);
    w.write_record(["estimate", "mean", "std_error", "samples", "clipped"])?;
    write_estimate(&mut w, "feynman_kac", &fk)?;
    o.report.push(format!("Feynman-Kac {:.8} ± {:.3e} over {} samples", fk.mean, fk.std_error, fk.samples));
    if config.simulation.levels >= 2 {
        let wc = weak_convergence(&sim, &field, &driver, config.simulation.levels)?;
        for (n, e) in wc.steps.iter().zip(&wc.estimates) {
            write_estimate(&mut w, &format!("level_{n}"), e)?;
        }
        for (i, d) in wc.differences.iter().enumerate() {
            write_estimate(&mut w, &format!("difference_{}_{}", wc.steps[i + 1], wc.steps[i]), d)?;
        }
        if let Some(r) = wc.halving_ratio() {
            o.report.push(format!("weak-error halving ratio {r:.3}"));
        }
    }
    w.flush()?;
    if config.plots.svg {
        let (_, _, n2) = config.simulation.binning.y2;
        let cells: Vec<f64> = hist.bins.iter().map(|b| b.mass).collect();
        o.write_text(out, "histogram.svg", &heatmap_svg("terminal histogram", n2, &cells))?;
    }
    Ok(())
}

/// One line of the validation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn pass_word(p: bool) -> &'static str {
    if p {
        "PASS"
    } else {
        "FAIL"
    }
}

fn run_validate(config: &ExperimentConfig, out: &Path, o: &mut Outcome) -> Result<()> {
    let px = parametrix(config, o)?;
    let tol = config.validate;
    let horizon = px.driver().horizon();
    let mut rows = Vec::new();
    let sources = config.probes.sources();
    let targets = config.probes.targets();

    for &(s, x) in &sources {
        let fld = px.density_field(s, x, horizon)?;
        let mass = fld.mass(horizon)?;
        rows.push(CheckRow {
            check: format!("normalization s={s} x=({}, {})", x[0], x[1]),
            value: (mass - 1.0).abs(),
            tolerance: tol.normalization,
            pass: (mass - 1.0).abs() <= tol.normalization,
        });
    }

    let (s0, x0) = sources[0];
    for &(t, y) in &targets {
        if !(t > s0) {
            continue;
        }
        let r = 0.5 * (s0 + t);
        let fld = px.density_field(s0, x0, r)?;
        let table = px.table(t, y)?;
        let through = fld.integrate(r, |z| table.density(r, z).map_or(f64::NAN, |d| d.value))?;
        let direct = table.density(s0, x0)?.value;
        let rel = (through - direct).abs() / direct.abs().max(1e-300);
        rows.push(CheckRow {
            check: format!("chapman-kolmogorov t={t} y=({}, {})", y[0], y[1]),
            value: rel,
            tolerance: tol.chapman_kolmogorov,
            pass: rel <= tol.chapman_kolmogorov,
        });
        let vr = table.volterra_residual(s0, x0)?;
        let limit = tol.volterra_factor * config.parametrix.quad_tolerance;
        rows.push(CheckRow {
            check: format!("volterra t={t} y=({}, {})", y[0], y[1]),
            value: vr.relative(),
            tolerance: limit,
            pass: vr.relative() <= limit,
        });
        rows.push(CheckRow {
            check: format!("series tail t={t} y=({}, {})", y[0], y[1]),
            value: table.tail_estimate,
            tolerance: config.parametrix.tolerance,
            pass: table.converged,
        });
    }

    let start = ReducedState::new(s0, x0[0], x0[1]);
    let analytic = solve_v(&px, start)?;
    let sim = SimConfig { initial: [s0, x0[0], x0[1]], ..config.sim_config() };
    let mc = feynman_kac(&sim, px.field(), px.driver())?;
    let band = tol.mc_sigmas * mc.std_error + config.parametrix.quad_tolerance * analytic.v.abs();
    rows.push(CheckRow {
        check: "monte-carlo vs analytic".into(),
        value: (mc.mean - analytic.v).abs(),
        tolerance: band,
        pass: (mc.mean - analytic.v).abs() <= band,
    });

    let surf = ValueSurface::build(&px, start)?;
    for st in &config.solve.states {
        let state = ReducedState::new(st[0], st[1], st[2]);
        if horizon - state.s < 0.1 || state.s < start.s {
            continue;
        }
        let res = ppde_residual(&surf, &px, state, config.solve.steps)?;
        rows.push(CheckRow {
            check: format!("ppde residual s={} x=({}, {})", st[0], st[1], st[2]),
            value: res.relative(),
            tolerance: tol.residual,
            pass: res.relative() <= tol.residual,
        });
    }

    let mut w = csv::Writer::from_writer(o.create(out, "validate.csv")?);
    for r in &rows {
        w.write_record([r.check.clone(), format!("{:.6e}", r.value), format!("{:.6e}", r.tolerance), r.pass.to_string()])?;
        o.report.push(format!("{} {}: {:.3e} (tolerance {:.3e})", pass_word(r.pass), r.check, r.value, r.tolerance));
    }
    w.flush()?;
    if rows.iter().any(|r| !r.pass) {
        o.status = Status::CheckFailure;
    }
    Ok(())
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 320.0;
const PAD: f64 = 48.0;

/// Polyline plot of `(x, y)` pairs with axis labels.
pub fn line_svg(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)]) -> String {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (SVG_W - 2.0 * PAD);
    let py = |y: f64| SVG_H - PAD - (y - y0) / (y1 - y0) * (SVG_H - 2.0 * PAD);
    let mut s = svg_open(title);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        SVG_W - 2.0 * PAD,
        SVG_H - 2.0 * PAD
    );
    let pts: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" "));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, SVG_W / 2.0, SVG_H - 12.0);
    let _ = writeln!(s, r#"<text x="12" y="{}" transform="rotate(-90 12 {})">{ylabel}</text>"#, SVG_H / 2.0, SVG_H / 2.0);
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}" font-size="10">{x0:.3}</text>"#, SVG_H - PAD + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{x1:.3}</text>"#, SVG_W - PAD, SVG_H - PAD + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y0:.3e}</text>"#, PAD - 4.0, SVG_H - PAD);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y1:.3e}</text>"#, PAD - 4.0, PAD + 10.0);
    s.push_str("</svg>\n");
    s
}

/// Grey-scale heatmap of a row-major grid with `columns` cells per row.
pub fn heatmap_svg(title: &str, columns: usize, cells: &[f64]) -> String {
    let columns = columns.max(1);
    let rows = cells.len().div_ceil(columns).max(1);
    let max = cells.iter().cloned().fold(0.0, f64::max);
    let cw = (SVG_W - 2.0 * PAD) / rows as f64;
    let ch = (SVG_H - 2.0 * PAD) / columns as f64;
    let mut s = svg_open(title);
    for (idx, &v) in cells.iter().enumerate() {
        let (i, j) = (idx / columns, idx % columns);
        let level = if max > 0.0 { 255.0 * (1.0 - v / max) } else { 255.0 };
        let g = level.round() as u8;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({g},{g},{g})"/>"#,
            PAD + i as f64 * cw,
            SVG_H - PAD - (j + 1) as f64 * ch,
            cw,
            ch
        );
    }
    s.push_str("</svg>\n");
    s
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" font-family=\"sans-serif\">\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\">{title}</text>\n",
        SVG_W / 2.0
    )
}

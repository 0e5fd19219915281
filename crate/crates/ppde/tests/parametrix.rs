use std::f64::consts::PI;
use std::sync::OnceLock;

use ppde::gaussian_kernel::{delta0_in, e_inv_map, e_map, KernelFrame, Sym2};
use ppde::parametrix::{Parametrix, ParametrixConfig};
use ppde::{BVDriver, CoefficientField, HolderConstants, State, StateFn, WindowGeometry};

fn kolmogorov() -> &'static Parametrix {
    static PX: OnceLock<Parametrix> = OnceLock::new();
    PX.get_or_init(|| {
        let driver = BVDriver::linear(1.0, 1.0).unwrap();
        let field = CoefficientField::kolmogorov(StateFn::constant(0.0));
        Parametrix::new(driver, field, ParametrixConfig::default()).unwrap()
    })
}

/// `σ = 1 + 0.1 sin x₁`, `μ = 0.2`, `A_t = √t`.
fn trig() -> &'static Parametrix {
    static PX: OnceLock<Parametrix> = OnceLock::new();
    PX.get_or_init(|| {
        let driver = BVDriver::power(0.5, 1.0).unwrap();
        let field = CoefficientField::new(
            StateFn::constant(0.2),
            StateFn::sine(1.0, 0.1),
            StateFn::constant(0.0),
            StateFn::constant(0.0),
            HolderConstants::default(),
        )
        .unwrap();
        Parametrix::new(driver, field, ParametrixConfig::default()).unwrap()
    })
}

/// `(W_t, ∫_0^t W dr)` shifted by the start point: Gaussian with mean
/// `(x₁ + bτ, x₂ + x₁τ + bτ²/2)` and covariance `[[τ, τ²/2], [τ²/2, τ³/3]]`.
fn brownian_pair_density(b: f64, tau: f64, x: State, y: State) -> f64 {
    let m = [x[0] + b * tau, x[1] + x[0] * tau + 0.5 * b * tau * tau];
    let (c11, c12, c22) = (tau, tau * tau / 2.0, tau * tau * tau / 3.0);
    let det = c11 * c22 - c12 * c12;
    let (d1, d2) = (y[0] - m[0], y[1] - m[1]);
    let q = (c22 * d1 * d1 - 2.0 * c12 * d1 * d2 + c11 * d2 * d2) / det;
    (-0.5 * q).exp() / (2.0 * PI * det.sqrt())
}

#[test]
fn kolmogorov_density_is_the_brownian_pair_law() {
    let px = kolmogorov();
    for (s, x, t, y) in [
        (0.0, [0.0, 0.0], 1.0, [0.0, 0.0]),
        (0.0, [0.3, -0.2], 1.0, [0.5, 0.4]),
        (0.25, [-0.4, 0.1], 1.0, [0.1, -0.3]),
        (0.0, [0.0, 0.0], 0.5, [0.2, 0.05]),
    ] {
        let want = brownian_pair_density(0.0, t - s, x, y);
        let got = px.density(s, x, t, y).unwrap();
        assert!((got.value - want).abs() <= 1e-10 * want, "{got:?} vs {want}");
        assert_eq!(got.correction, 0.0);
        assert_eq!(px.delta_k(1, s, x, t, y).unwrap(), 0.0);
    }
    assert_eq!(px.table(1.0, [0.0, 0.0]).unwrap().order, 0);
}

#[test]
fn constant_drift_density_is_exact() {
    let driver = BVDriver::linear(1.0, 1.0).unwrap();
    let field = CoefficientField::new(
        StateFn::constant(0.3),
        StateFn::constant(1.0),
        StateFn::constant(0.0),
        StateFn::constant(0.0),
        HolderConstants::default(),
    )
    .unwrap();
    let px = Parametrix::new(driver, field, ParametrixConfig::default()).unwrap();
    let (x, y) = ([0.1, 0.2], [0.6, 0.5]);
    let want = brownian_pair_density(0.3, 1.0, x, y);
    let got = px.density(0.0, x, 1.0, y).unwrap().value;
    assert!((got - want).abs() < 2e-3 * want, "{got} vs {want}");
}

/// Tanh-sinh nodes and weights on `(0, 1)`.
fn tanh_sinh_unit(h: f64, cut: f64) -> Vec<(f64, f64)> {
    let n = (cut / h).round() as i64;
    (-n..=n)
        .map(|k| {
            let tau = k as f64 * h;
            let arg = 0.5 * PI * tau.sinh();
            let u = 0.5 * (1.0 + arg.tanh());
            let w = 0.5 * h * 0.5 * PI * tau.cosh() / arg.cosh().powi(2);
            (u, w)
        })
        .filter(|(u, _)| *u > 1e-10 && *u < 1.0 - 1e-10)
        .collect()
}

/// `∫ f(z) dz` by a tensor trapezoid on the disc of radius 8 in the
/// coordinates `z = mean + L u` of the covariance `cov`.
fn trapezoid2(mean: State, cov: Sym2, step: f64, f: impl Fn(State) -> f64) -> f64 {
    let l = cov.cholesky();
    let m = (8.0 / step).round() as i64;
    let mut acc = 0.0;
    for i in -m..=m {
        for j in -m..=m {
            let (a, b) = (i as f64 * step, j as f64 * step);
            if a * a + b * b > 64.0 {
                continue;
            }
            let z = [mean[0] + l[0] * a, mean[1] + l[1] * a + l[2] * b];
            acc += f(z);
        }
    }
    acc * step * step * l[0] * l[2]
}

/// `Δ₁ = ∫_s^t ∫ Δ₀(s,x;r,z) Δ₀(r,z;t,y) dz dr` by brute force: tanh-sinh
/// in `r` and, for each `r`, a trapezoid in the frame of whichever of the
/// two kernels is narrower.
fn delta1_brute(px: &Parametrix, s: f64, x: State, t: f64, y: State) -> f64 {
    let driver = px.driver();
    let field = px.field();
    let a = field.bounds.a_high;
    tanh_sinh_unit(1.0 / 12.0, 3.2)
        .into_iter()
        .map(|(u, w)| {
            let r = s + (t - s) * u;
            let left = WindowGeometry::new(driver, s, r).unwrap();
            let right = WindowGeometry::new(driver, r, t).unwrap();
            let lf = KernelFrame::new(driver, s, r, a).unwrap();
            let inc = lf.geometry.increment;
            let sg = lf.sigma;
            let left_cov =
                Sym2 { xx: sg.xx, xy: sg.xy + inc * sg.xx, yy: sg.yy + 2.0 * inc * sg.xy + inc * inc * sg.xx };
            let right_cov = KernelFrame::new(driver, r, t, a).unwrap().sigma;
            let (mean, cov) = if left_cov.det() < right_cov.det() {
                (e_inv_map(driver, s, r, x), left_cov)
            } else {
                (e_map(driver, r, t, y), right_cov)
            };
            let inner = trapezoid2(mean, cov, 0.1, |z| {
                let l = delta0_in(&left, field, x, z);
                if l == 0.0 {
                    return 0.0;
                }
                l * delta0_in(&right, field, z, y)
            });
            w * (t - s) * inner
        })
        .sum()
}

#[test]
fn first_order_matches_brute_force_convolution() {
    let px = trig();
    let (t, y) = (1.0, [0.2, 0.1]);
    let probes = [
        (0.0, e_inv_map(px.driver(), 0.0, 1.0, [0.2, 0.1])),
        (0.0, [0.6, 0.4]),
        (0.5, [-0.2, 0.3]),
    ];
    let want: Vec<f64> = probes.iter().map(|&(s, x)| delta1_brute(px, s, x, t, y)).collect();
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (&(s, x), w) in probes.iter().zip(&want) {
        let got = px.delta_k(1, s, x, t, y).unwrap();
        assert!((got - w).abs() <= 5e-3 * scale, "s={s} x={x:?}: table {got} brute {w}");
    }
}

#[test]
fn series_orders_decay_geometrically() {
    let px = trig();
    let tab = px.table(1.0, [0.0, 0.0]).unwrap();
    assert!(tab.converged && tab.order >= 2, "{tab:?}");
    let kappa = px.kappa0();
    // sup_k · T^{kκ} must shrink once the factorial-type decay kicks in
    let weighted: Vec<f64> = tab.sup_norms.iter().enumerate().map(|(k, n)| n * 1f64.powf(k as f64 * kappa)).collect();
    for k in 1..weighted.len() - 1 {
        assert!(weighted[k + 1] < weighted[k], "{weighted:?}");
    }
    let ratio = tab.sup_norms[2] / tab.sup_norms[1];
    assert!(ratio > 0.0 && ratio < 1.0, "second to first order ratio {ratio}");
    assert!(tab.tail_estimate <= px.config().tolerance);
    assert!(tab.bound_constant.is_finite() && tab.tail_bound.is_finite());
}

#[test]
fn x1_derivative_matches_central_differences() {
    let px = trig();
    let (t, y) = (1.0, [0.1, -0.1]);
    for (s, x) in [(0.0, [0.0, 0.0]), (0.3, [0.4, -0.2]), (0.6, [-0.3, 0.1])] {
        let e = 1e-4;
        let up = px.density(s, [x[0] + e, x[1]], t, y).unwrap().raw();
        let dn = px.density(s, [x[0] - e, x[1]], t, y).unwrap().raw();
        let fd = (up - dn) / (2.0 * e);
        let d = px.density_dx1(s, x, t, y).unwrap();
        let f = px.density(s, x, t, y).unwrap().value;
        let tol = px.config().quad_tolerance * (fd.abs() + f / (t - s).sqrt());
        assert!((d - fd).abs() <= tol, "s={s}: {d} vs {fd}");
    }
}

#[test]
fn density_is_lipschitz_in_the_running_integral() {
    let px = trig();
    let (s, x, t, y) = (0.0, [0.1, 0.0], 1.0, [0.2, 0.1]);
    let f0 = px.density(s, x, t, y).unwrap().value;
    let diff = |h: f64| (px.density(s, [x[0], x[1] + h], t, y).unwrap().value - f0).abs();
    let (d1, d2) = (diff(1e-2), diff(1e-3));
    let order = (d1 / d2).log10();
    assert!((order - 1.0).abs() < 0.1, "observed order {order}");
}

#[test]
fn forward_and_backward_constructions_agree() {
    let px = trig();
    let (s, x, t) = (0.0, [0.0, 0.0], 1.0);
    let field = px.density_field(s, x, t).unwrap();
    for y in [[0.0, 0.0], [0.3, 0.2], [-0.4, 0.1]] {
        let fwd = field.density(t, y).unwrap();
        let bwd = px.density(s, x, t, y).unwrap().value;
        assert!((fwd - bwd).abs() <= 2e-3 * bwd, "y={y:?}: forward {fwd} backward {bwd}");
    }
    assert!((field.mass(t).unwrap() - 1.0).abs() < 1e-3);
}

#[test]
fn volterra_equation_holds_with_the_finer_rule() {
    let px = trig();
    let (t, y) = (1.0, [0.0, 0.0]);
    let tol = 5.0 * px.config().quad_tolerance;
    for (s, x) in [(0.0, e_inv_map(px.driver(), 0.0, 1.0, y)), (0.4, [0.2, 0.1])] {
        let r = px.volterra_residual(s, x, t, y).unwrap();
        assert!(r.relative() <= tol, "s={s}: {r:?}");
    }
}

#[test]
fn reversed_window_is_rejected() {
    let px = kolmogorov();
    assert!(px.density(1.0, [0.0, 0.0], 0.5, [0.0, 0.0]).is_err());
    assert!(px.density(0.5, [0.0, 0.0], 0.5, [0.0, 0.0]).is_err());
}

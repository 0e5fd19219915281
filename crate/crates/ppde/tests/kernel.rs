use ppde::coefficient_field::HolderConstants;
use ppde::gaussian_kernel::{
    calibrate_varpi, delta0, e_inv_map, e_map, reference_envelopes, Derivative, KernelFrame, Sym2, WindowGeometry,
};
use ppde::quad::NormalRule2;
use ppde::{BVDriver, CoefficientField, StateFn};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn identity() -> BVDriver {
    BVDriver::linear(1.0, 1.0).unwrap()
}

#[test]
fn identity_window_covariance_and_density() {
    let f = KernelFrame::new(&identity(), 0.0, 1.0, 1.0).unwrap();
    let s = f.sigma;
    assert!((s.xx - 1.0).abs() < 1e-14 && (s.xy + 0.5).abs() < 1e-14 && (s.yy - 1.0 / 3.0).abs() < 1e-14);
    assert!((f.det() - 1.0 / 12.0).abs() < 1e-14);
    let i = f.inv;
    assert!((i.xx - 4.0).abs() < 1e-12 && (i.xy - 6.0).abs() < 1e-12 && (i.yy - 12.0).abs() < 1e-12);
    let want = 1.0 / (2.0 * std::f64::consts::PI * (1.0f64 / 12.0).sqrt());
    assert!((f.density([0.0, 0.0], [0.0, 0.0]) - want).abs() < 1e-14);
    assert!((want - 0.5513).abs() < 1e-4);
}

#[test]
fn e_maps() {
    let d = identity();
    assert_eq!(e_map(&d, 0.0, 1.0, [1.0, 0.0]), [1.0, -1.0]);
    assert_eq!(e_map(&d, 0.4, 0.4, [1.3, 2.0]), [1.3, 2.0]);
    let p = BVDriver::power(0.5, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let y = [rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0];
        let back = e_inv_map(&p, 0.1, 0.8, e_map(&p, 0.1, 0.8, y));
        assert!((back[0] - y[0]).abs() < 1e-15 && (back[1] - y[1]).abs() < 1e-14);
    }
}

#[test]
fn density_integrates_to_one_over_y() {
    // y ↦ f(s,x;t,y) is Gaussian with mean E⁻¹(x); integrate with Hermite
    // nodes placed in that frame
    let d = BVDriver::power(0.5, 1.0).unwrap();
    let f = KernelFrame::new(&d, 0.2, 0.7, 1.3).unwrap();
    let x = [0.4, -0.3];
    let mean = f.e_inv(x);
    let inc = f.geometry.increment;
    // covariance of y is E⁻¹ Σ E⁻ᵀ
    let s = f.sigma;
    let cov = Sym2 { xx: s.xx, xy: s.xy + inc * s.xx, yy: s.yy + 2.0 * inc * s.xy + inc * inc * s.xx };
    let l = cov.cholesky();
    let rule = NormalRule2::new(20);
    let phi = |u: [f64; 2]| (-(u[0] * u[0] + u[1] * u[1]) / 2.0).exp() / (2.0 * std::f64::consts::PI);
    let jac = l[0] * l[2];
    let total: f64 = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(u, w)| {
            let y = [mean[0] + l[0] * u[0], mean[1] + l[1] * u[0] + l[2] * u[1]];
            w * f.density(x, y) * jac / phi(*u)
        })
        .sum();
    assert!((total - 1.0).abs() < 1e-6, "{total}");
}

#[test]
fn derivatives_match_finite_differences() {
    let d = BVDriver::power(0.5, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let s = 0.5 * rng.random::<f64>();
        let t = s + 0.05 + 0.4 * rng.random::<f64>();
        let f = KernelFrame::new(&d, s, t, 0.5 + rng.random::<f64>()).unwrap();
        let y = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
        let m = f.e_inv([0.0, 0.0]);
        let _ = m;
        let l = f.sigma.cholesky();
        let u = [rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0];
        let x0 = f.e_map(y);
        let x = [x0[0] + l[0] * u[0], x0[1] + l[1] * u[0] + l[2] * u[1]];
        let h1 = 1e-4 * l[0];
        let h2 = 1e-4 * l[2];
        let dx = |g: &dyn Fn([f64; 2]) -> f64, i: usize| {
            let h = if i == 0 { h1 } else { h2 };
            let mut a = x;
            let mut b = x;
            a[i] += h;
            b[i] -= h;
            (g(a) - g(b)) / (2.0 * h)
        };
        let dens = |p: [f64; 2]| f.density(p, y);
        let k = f.derivatives(x, y);
        let scale1 = k.f / l[0];
        assert!((dx(&dens, 0) - k.d1).abs() <= 1e-6 * scale1.max(k.d1.abs()), "d1");
        assert!((dx(&dens, 1) - k.d2).abs() <= 1e-6 * (k.f / l[2]).max(k.d2.abs()), "d2");
        let d11 = |p: [f64; 2]| f.derivative(p, y, Derivative::X1X1);
        let d1 = |p: [f64; 2]| f.derivative(p, y, Derivative::X1);
        assert!((dx(&d1, 0) - k.d11).abs() <= 1e-6 * (k.f / (l[0] * l[0])), "d11");
        assert!((dx(&d1, 1) - k.d12).abs() <= 1e-6 * (k.f / (l[0] * l[2])), "d12");
        assert!((dx(&d11, 0) - k.d111).abs() <= 1e-4 * (k.f / l[0].powi(3)), "d111");
        assert!((dx(&d11, 1) - k.d112).abs() <= 1e-4 * (k.f / (l[0] * l[0] * l[2])), "d112");
    }
}

#[test]
fn odd_even_structure_at_zero_offset() {
    let f = KernelFrame::new(&identity(), 0.1, 0.6, 0.8).unwrap();
    let y = [0.3, 0.2];
    let x = f.e_map(y);
    let k = f.derivatives(x, y);
    assert_eq!(k.d1, 0.0);
    assert!((k.d11 + k.f * f.inv.xx).abs() < 1e-12 * k.f * f.inv.xx);
}

#[test]
fn covariance_algebra_against_direct_inversion() {
    let drivers = [
        BVDriver::linear(1.0, 1.0).unwrap(),
        BVDriver::power(0.5, 1.0).unwrap(),
        BVDriver::holder_pair(0.8, 0.5, 1.0, 0.5, 1.0).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for d in &drivers {
        for _ in 0..1000 {
            let width = 10f64.powf(-4.0 * rng.random::<f64>());
            let s = (1.0 - width) * rng.random::<f64>();
            let a = 0.5 + rng.random::<f64>();
            let f = KernelFrame::new(d, s, s + width, a).unwrap();
            let direct_det = f.sigma.det();
            assert!((direct_det - f.det()).abs() <= 1e-10 * f.det());
            let direct = f.sigma.inverse();
            for (u, v) in [(direct.xx, f.inv.xx), (direct.xy, f.inv.xy), (direct.yy, f.inv.yy)] {
                assert!((u - v).abs() <= 1e-10 * v.abs().max(f.inv.xx.abs().min(f.inv.yy.abs())));
            }
        }
    }
}

#[test]
fn degenerate_window_is_rejected() {
    let d = identity();
    let mo = d.moments(0.0, 1.0).unwrap();
    let mut bad = mo;
    bad.m = 1e-31;
    assert!(WindowGeometry::from_moments(0.0, 1.0, &bad).is_err());
}

fn trig_field() -> CoefficientField {
    CoefficientField::new(
        StateFn::constant(0.2),
        StateFn::sine(1.0, 0.1),
        StateFn::constant(0.0),
        StateFn::constant(1.0),
        HolderConstants::default(),
    )
    .unwrap()
}

#[test]
fn delta0_vanishing_cases() {
    let d = identity();
    let k = CoefficientField::kolmogorov(StateFn::constant(1.0));
    assert_eq!(delta0(&d, &k, 0.0, [0.3, 0.1], 1.0, [1.0, -0.4]).unwrap(), 0.0);
    let drift = CoefficientField::new(
        StateFn::constant(1.0),
        StateFn::constant(1.0),
        StateFn::constant(0.0),
        StateFn::constant(0.0),
        HolderConstants::default(),
    )
    .unwrap();
    let g = WindowGeometry::new(&d, 0.2, 0.9).unwrap();
    let y = [0.4, 0.7];
    assert_eq!(delta0(&d, &drift, 0.2, g.e_map(y), 0.9, y).unwrap().abs(), 0.0);
}

#[test]
fn delta0_bounded_by_singular_envelope() {
    // |Δ₀| (t-s)^{1-κ₀} / f° stays bounded as the window shrinks
    let d = BVDriver::power(0.5, 1.0).unwrap();
    let field = trig_field();
    let a_high = field.bounds.a_high;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let width = 10f64.powf(-3.0 * rng.random::<f64>());
        let s = (1.0 - width) * rng.random::<f64>();
        let t = s + width;
        let g = WindowGeometry::new(&d, s, t).unwrap();
        let y = [rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0];
        let l = g.sigma1.scale(a_high).cholesky();
        let u = [rng.random::<f64>() * 6.0 - 3.0, rng.random::<f64>() * 6.0 - 3.0];
        let e = g.e_map(y);
        let x = [e[0] + l[0] * u[0], e[1] + l[1] * u[0] + l[2] * u[1]];
        let v = delta0(&d, &field, s, x, t, y).unwrap();
        let fc = g.density_w(4.0 * a_high, g.offset_w(x, y));
        worst = worst.max(v.abs() * width.powf(0.5) / fc);
    }
    assert!(worst.is_finite() && worst < 50.0, "{worst}");
}

#[test]
fn envelopes_dominate_frozen_kernels() {
    let d = BVDriver::power(0.5, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a_high = 1.21;
    let samples: Vec<_> = (0..10_000)
        .map(|_| {
            let width = 10f64.powf(-3.0 * rng.random::<f64>());
            let s = (1.0 - width) * rng.random::<f64>();
            let g = WindowGeometry::new(&d, s, s + width).unwrap();
            let l = g.sigma1.scale(a_high).cholesky();
            let u = [rng.random::<f64>() * 8.0 - 4.0, rng.random::<f64>() * 8.0 - 4.0];
            (s, s + width, [l[0] * u[0], l[1] * u[0] + l[2] * u[1]], rng.random::<f64>())
        })
        .collect();
    let shape = calibrate_varpi(&d, 0.81, a_high, &samples).unwrap();
    assert!(shape.c.is_finite() && shape.c > 0.0);
    let mut worst_half: f64 = 0.0;
    for &(s, t, w, u) in &samples {
        let a = 0.81 + u * (a_high - 0.81);
        let env = reference_envelopes(&d, s, w, t, [0.0, 0.0], a_high, &shape).unwrap();
        let g = WindowGeometry::new(&d, s, t).unwrap();
        let f = g.density_w(a, w);
        assert!(f <= env.varpi * env.f_circ * (1.0 + 1e-9));
        worst_half = worst_half.max(env.f_circ / env.f_circ_half);
    }
    // f° ≤ C f^{°,1/2} with C = 2 (ratio of determinants, exponent ordering)
    assert!(worst_half <= 2.0 + 1e-12, "{worst_half}");
}

#[test]
fn frozen_kernel_solves_its_backward_equation_along_the_flow() {
    // ∂_s f + ½ a ∂²_{x₁x₁} f = 0 when s moves along (s+h, x₁, x₂ + x₁(A_{s+h}-A_s))
    let d = BVDriver::power(0.5, 1.0).unwrap();
    let a = 0.9;
    let (t, y) = (0.8, [0.2, 0.1]);
    for &(s, u) in &[(0.2, [0.3, -0.5]), (0.5, [-1.0, 0.8]), (0.05, [0.5, 0.5])] {
        let base = KernelFrame::new(&d, s, t, a).unwrap();
        let l = base.sigma.cholesky();
        let e = base.e_map(y);
        let x = [e[0] + l[0] * u[0], e[1] + l[1] * u[0] + l[2] * u[1]];
        let f_at = |h: f64| {
            let fr = KernelFrame::new(&d, s + h, t, a).unwrap();
            fr.density([x[0], x[1] + x[0] * d.increment(s, s + h)], y)
        };
        let h = 1e-5 * (t - s);
        let dt = (-f_at(2.0 * h) + 4.0 * f_at(h) - 3.0 * f_at(0.0)) / (2.0 * h);
        let k = base.derivatives(x, y);
        let res = dt + 0.5 * a * k.d11;
        assert!(res.abs() <= 1e-3 * dt.abs().max(0.5 * a * k.d11.abs()), "s={s}: {res} vs {dt}");
    }
}

#[test]
fn gradient_bound_scaling() {
    // |(Σ⁻¹w)₁| (t-s)^{1/2} ≤ C √q for the identity driver (β₀ = 0)
    let d = identity();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let mut worst2: f64 = 0.0;
    for _ in 0..2000 {
        let width = 10f64.powf(-4.0 * rng.random::<f64>());
        let f = KernelFrame::new(&d, 0.0, width, 1.0).unwrap();
        let w = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
        let p = f.inv.apply(w);
        let q = f.inv.quad(w);
        worst = worst.max(p[0].abs() * width.sqrt() / q.sqrt());
        worst2 = worst2.max(p[1].abs() * width.powf(1.5) / q.sqrt());
    }
    assert!(worst < 10.0 && worst2 < 10.0, "{worst} {worst2}");
}

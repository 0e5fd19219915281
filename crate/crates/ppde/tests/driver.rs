use ppde::{BVDriver, DriverKind, GridPath};
use proptest::prelude::*;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1e-300)
}

#[test]
fn eval_closed_forms() {
    assert_eq!(BVDriver::power(0.5, 1.0).unwrap().eval(0.25).unwrap(), 0.5);
    assert!((BVDriver::linear(1.0, 1.0).unwrap().eval(0.7).unwrap() - 0.7).abs() < 1e-15);
    assert_eq!(BVDriver::power(1.0, 1.0).unwrap().eval(0.0).unwrap(), 0.0);
    assert!(BVDriver::linear(1.0, 1.0).unwrap().eval(1.5).is_err());
}

#[test]
fn identity_driver_moments_match_symbolic_integrals() {
    let d = BVDriver::linear(1.0, 1.0).unwrap();
    let m = d.moments(0.0, 1.0).unwrap();
    assert!(close(m.a_bar, 0.5, 1e-14));
    assert!(close(m.m, 1.0 / 12.0, 1e-14));
    assert!(close(m.m_tilde, 1.0 / 3.0, 1e-14));
    // same driver through the tabulated path exercises the quadrature branch
    let tab = BVDriver::new(
        DriverKind::Tabulated { times: vec![0.0, 0.3, 1.0], values: vec![0.0, 0.3, 1.0] },
        1.0,
        64,
    )
    .unwrap();
    for &(s, t) in &[(0.0, 1.0), (0.1, 0.35), (0.5, 0.5 + 1e-6)] {
        let m = tab.moments(s, t).unwrap();
        let tau: f64 = t - s;
        assert!(close(m.m, tau * tau / 12.0, 1e-10), "{s} {t} {}", m.m);
        assert!(close(m.m_tilde, tau * tau / 3.0, 1e-10));
    }
}

#[test]
fn power_driver_anchored_second_moment() {
    let d = BVDriver::power(0.5, 1.0).unwrap();
    let m = d.moments(0.0, 1.0).unwrap();
    assert!(close(m.m_tilde, 0.5, 1e-14));
    // shifted windows go through adaptive quadrature; compare with the
    // symbolic antiderivative of (r^γ - s^γ)^2
    let (s, t) = (0.2f64, 0.9f64);
    let j2 = (t * t - s * s) / 2.0 - 2.0 * s.sqrt() * (t.powf(1.5) - s.powf(1.5)) / 1.5 + s * (t - s);
    let m = d.moments(s, t).unwrap();
    assert!(close(m.m_tilde, j2 / (t - s), 1e-10), "{} {}", m.m_tilde, j2 / (t - s));
}

#[test]
fn identity_ratio_is_four_away_from_zero() {
    let d = BVDriver::linear(1.0, 1.0).unwrap();
    let windows: Vec<(f64, f64)> = d.default_windows(12, 6).into_iter().filter(|w| w.0 > 0.0).collect();
    for &(s, t) in &windows {
        let m = d.moments(s, t).unwrap();
        assert!(close(m.m_tilde / m.m, 4.0, 1e-12));
    }
    let est = d.estimate_exponents(&windows).unwrap();
    assert!(est.beta[0].abs() < 1e-10 && est.beta[1].abs() < 1e-10);
}

#[test]
fn exponents_identity_driver() {
    let d = BVDriver::linear(1.0, 1.0).unwrap();
    let est = d.estimate_exponents(&d.default_windows(14, 8)).unwrap();
    let want = [0.0, 0.0, 2.0, 2.0, 1.0];
    for i in 0..5 {
        assert!((est.beta[i] - want[i]).abs() < 0.05, "β{i} = {}", est.beta[i]);
    }
}

#[test]
fn power_driver_exponents_anchored_and_shifted() {
    let d = BVDriver::power(0.5, 1.0).unwrap();
    let est = d.estimate_exponents(&d.default_windows(14, 8)).unwrap();
    // lower envelope of 1/m comes from windows at 0, where m ∝ τ^{2γ}
    assert!((est.beta[2] - 1.0).abs() < 0.1, "{:?}", est.beta);
    assert!((est.beta[4] - 0.5).abs() < 0.1, "{:?}", est.beta);
    // away from 0 the driver is smooth and m ∝ τ², so the upper envelope
    // of 1/m grows like τ^{-2}
    assert!((est.beta[3] - 2.0).abs() < 0.1, "{:?}", est.beta);
}

#[test]
fn regression_rejects_single_width() {
    let d = BVDriver::linear(1.0, 1.0).unwrap();
    let w = vec![(0.0, 0.5), (0.25, 0.75), (0.5, 1.0)];
    assert!(matches!(d.estimate_exponents(&w), Err(ppde::Error::DegenerateRegression)));
    assert!(d.estimate_exponents(&[(0.5, 0.2), (0.0, 0.1)]).is_err());
}

#[test]
fn holder_pair_sandwich() {
    let (g1, g2) = (0.8, 0.5);
    let d = BVDriver::holder_pair(g1, g2, 1.0, 0.5, 1.0).unwrap();
    assert_eq!(d.exponents().unwrap(), [2.0 * (g1 - g2), 0.0, 2.0 * g2, 2.0 * g1, g2]);
    let mut worst: f64 = 0.0;
    for &(s, t) in &d.default_windows(12, 16) {
        let m = d.moments(s, t).unwrap();
        let r = m.m_tilde / m.m;
        assert!(r >= 1.0 - 1e-12);
        worst = worst.max(r * (t - s).powf(2.0 * (g1 - g2)));
    }
    assert!(worst.is_finite());
}

#[test]
fn stieltjes_examples() {
    let d = BVDriver::linear(1.0, 1.0).unwrap();
    let one = GridPath::constant(1.0, 1.0);
    assert!((d.stieltjes_integral(&one, 0.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
    let c = GridPath::constant(1.0, -2.5);
    assert!((d.stieltjes_integral(&c, 0.2, 0.7).unwrap() + 2.5 * 0.5).abs() < 1e-14);
    let ramp = GridPath::from_fn(1.0, 10_000, |r| r);
    assert!((d.stieltjes_integral(&ramp, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-3);
    assert!(d.stieltjes_integral(&ramp, 0.6, 0.6).is_err());
    let short = GridPath::new(vec![0.3, 0.5], vec![1.0, 1.0]).unwrap();
    assert!(d.stieltjes_integral(&short, 0.0, 0.4).is_err());
}

#[test]
fn bump_and_freeze() {
    let p = GridPath::from_fn(1.0, 10, |r| r);
    let b = p.bump(0.55, 2.0);
    assert_eq!(b.value_at(0.5), p.value_at(0.5));
    assert!((b.value_at(0.55) - p.value_at(0.55) - 2.0).abs() < 1e-15);
    assert!((b.value_at(0.9) - p.value_at(0.9) - 2.0).abs() < 1e-15);
    let f = p.freeze(0.55);
    assert_eq!(f.value_at(0.99), p.value_at(0.55));
    assert_eq!(f.value_at(0.2), p.value_at(0.2));
}

#[test]
fn total_variation() {
    assert!((BVDriver::power(0.3, 2.0).unwrap().total_variation() - 2f64.powf(0.3)).abs() < 1e-14);
    let d = BVDriver::new(
        DriverKind::Tabulated { times: vec![0.0, 0.5, 1.0], values: vec![0.0, 1.0, 0.25] },
        1.0,
        64,
    )
    .unwrap();
    assert!(!d.is_monotone());
    assert!((d.total_variation() - 1.75).abs() < 1e-12);
}

#[test]
fn exponent_ordering_is_enforced() {
    let d = BVDriver::linear(1.0, 1.0).unwrap();
    assert!(d.clone().with_exponents([0.5, 0.0, 2.0, 2.0, 1.0]).is_ok());
    assert!(d.with_exponents([3.0, 0.0, 2.0, 2.0, 1.0]).is_err());
}

fn drivers() -> Vec<BVDriver> {
    vec![
        BVDriver::linear(1.0, 1.0).unwrap(),
        BVDriver::power(0.3, 1.0).unwrap(),
        BVDriver::power(0.7, 1.0).unwrap(),
        BVDriver::holder_pair(0.9, 0.4, 1.0, 0.7, 1.0).unwrap(),
        BVDriver::new(DriverKind::AbsolutelyContinuous { density: vec![1.0, 3.0, 0.5, 2.0] }, 1.0, 64).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn moments_are_a_variance_decomposition(a in 0.0f64..1.0, b in 0.0f64..1.0, k in 0usize..5) {
        let (s, t) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(t - s > 1e-9);
        let d = &drivers()[k];
        let m = d.moments(s, t).unwrap();
        prop_assert!(m.m >= 0.0);
        prop_assert!(m.m <= m.m_tilde * (1.0 + 1e-12));
        let rebuilt = m.m_tilde - m.offset * m.offset;
        prop_assert!((rebuilt - m.m).abs() <= 1e-9 * m.m_tilde);
    }

    #[test]
    fn increments_are_additive(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, k in 0usize..5) {
        let d = &drivers()[k];
        let lhs = d.increment(a, c);
        let rhs = d.increment(a, b) + d.increment(b, c);
        prop_assert!((lhs - rhs).abs() < 1e-12);
        prop_assert!((d.increment(a, c) - (d.value(c) - d.value(a))).abs() < 1e-12);
    }
}

#[test]
fn anchored_moment_vanishes_as_window_shrinks() {
    for d in drivers() {
        let mut prev = f64::INFINITY;
        for k in 1..12 {
            let m = d.moments(0.3, 0.3 + 2f64.powi(-k)).unwrap().m_tilde;
            assert!(m < prev);
            prev = m;
        }
        assert!(prev < 1e-3);
    }
}

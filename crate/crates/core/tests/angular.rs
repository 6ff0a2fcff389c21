use std::f64::consts::FRAC_PI_2;

use approx::assert_relative_eq;
use blowuplab::angular::*;
use proptest::prelude::*;

// (16, 10) reference values from an independent DOP853 shooting at rtol 1e-13
const V0: f64 = 0.746_203_776_262_57;
const V_BOUNDARY: f64 = 0.920_433_804_884_387;
const K: f64 = 4.741_688_783_876_38;
const KAPPA1: f64 = -28.585_983_677_46;
const GAMMA: f64 = 2.481_812_717_19;

#[test]
fn profile_matches_reference() {
    let p = Problem::new(16, 10.0).unwrap();
    let v = solve_profile_v(&p, 400).unwrap();
    assert_relative_eq!(v.v0, V0, max_relative = 1e-10);
    assert_relative_eq!(v.boundary_value(), V_BOUNDARY, max_relative = 1e-10);
    assert_relative_eq!(v.k, K, max_relative = 1e-10);
    // K = q V(pi/2)^{q-1}
    assert_relative_eq!(v.k, 10.0 * v.boundary_value().powi(9), max_relative = 1e-12);
    assert!(v.interior_residual() < 1e-8);
    assert!(v.boundary_residual() < 1e-10);
}

#[test]
fn ground_state_and_gamma_match_reference() {
    let cell = classify_point(16, 10.0, 400);
    assert_eq!(cell.class, Some(JlClass::Supercritical));
    assert_relative_eq!(cell.kappa1, KAPPA1, max_relative = 1e-9);
    assert_relative_eq!(cell.gamma, GAMMA, max_relative = 1e-9);
    let eigs = solve_angular_eigs(K, 16, 3, 400).unwrap();
    assert_relative_eq!(eigs[0].kappa, KAPPA1, max_relative = 1e-9);
    assert!(eigs[0].kappa < eigs[1].kappa && eigs[1].kappa < eigs[2].kappa);
    assert!(eigs.iter().all(|e| e.robin_residual(K) < 1e-8));
}

// 2 Gamma(n/4)^2 / Gamma((n-2)/4)^2 evaluated with mpmath
#[test]
fn hardy_constant_matches_closed_form() {
    for (n, c) in [(5, 1.094_219_807_613_238_3), (8, 2.546_479_089_470_325_4), (16, 6.518_986_469_044_033), (20, 8.514_594_571_812_614)] {
        assert_relative_eq!(trace_hardy_constant(n).unwrap(), c, max_relative = 1e-12);
    }
}

#[test]
fn hardy_constant_is_the_critical_robin_coefficient() {
    for n in [6usize, 10] {
        let c = trace_hardy_constant(n).unwrap();
        let kappa = robin_eigenvalue(n, c, 1).unwrap();
        let target = -((n - 2) as f64).powi(2) / 4.0;
        assert_relative_eq!(kappa, target, max_relative = 1e-7);
    }
}

#[test]
fn subcritical_and_missing_profiles() {
    assert_eq!(classify_point(3, 2.5, 400).class, Some(JlClass::Subcritical));
    let cell = classify_point(3, 1.5, 400);
    assert!(cell.class.is_none() && cell.error.is_some());
    assert!(Problem::new(16, 1.0).is_err());
    assert!(Problem::new(2, 3.0).is_err());
}

#[test]
fn scan_thresholds_are_monotone_tails() {
    let cells = jl_scan(&[11, 16], &[2.0, 3.0, 5.0, 10.0], 400);
    assert_eq!(cells.len(), 8);
    for (n, thr) in empirical_thresholds(&cells) {
        let q0 = thr.expect("large q is supercritical for n >= 11");
        for c in cells.iter().filter(|c| c.n == n && c.q >= q0) {
            assert_eq!(c.class, Some(JlClass::Supercritical));
        }
    }
}

#[test]
fn profile_derivative_vanishes_on_the_axis() {
    let p = Problem::new(12, 8.0).unwrap();
    let v = solve_profile_v(&p, 400).unwrap();
    assert!(v.deriv(0.0).abs() < 1e-10);
    assert!(v.deriv(FRAC_PI_2) > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn robin_eigenvalue_decreases_with_k(n in 3usize..20, k in 0.1f64..6.0) {
        let lo = robin_eigenvalue(n, k, 1).unwrap();
        let hi = robin_eigenvalue(n, k + 0.5, 1).unwrap();
        prop_assert!(hi < lo);
    }

    #[test]
    fn mu1_solves_its_quadratic(n in 6usize..24, q in 3.0f64..20.0, shift in 0.001f64..1.0) {
        let p = Problem::new(n, q).unwrap();
        let b = p.nf() - 2.0 - 2.0 * p.m;
        // kappa between the double-root value and the trivial-root value
        let k_double = -b * b / 4.0 - p.m * (p.nf() - 2.0 - p.m);
        let k_zero = -p.m * (p.nf() - 2.0 - p.m);
        let kappa = k_double + shift * (k_zero - k_double);
        let mu = mu1(kappa, &p).unwrap();
        let res = mu * mu - b * mu - (p.m * (p.nf() - 2.0 - p.m) + kappa);
        prop_assert!(res.abs() < 1e-9 * (1.0 + b * b));
        prop_assert!(mu >= -1e-12 && mu <= b / 2.0 + 1e-12);
    }

    #[test]
    fn classification_agrees_with_kappa_sign(n in 3usize..22, q in 2.5f64..16.0) {
        let cell = classify_point(n, q, 400);
        if let Some(class) = cell.class {
            let s = cell.kappa1 + ((n - 2) as f64).powi(2) / 4.0;
            match class {
                JlClass::Supercritical => prop_assert!(s > 0.0),
                JlClass::Subcritical => prop_assert!(s < 0.0),
                JlClass::Critical => prop_assert!(s.abs() < 1e-6 * (1.0 + cell.kappa1.abs())),
            }
        }
    }
}

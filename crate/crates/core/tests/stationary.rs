use std::f64::consts::FRAC_PI_2;
use std::sync::OnceLock;

use approx::assert_relative_eq;
use blowuplab::angular::Problem;
use blowuplab::stationary::*;

fn context() -> &'static StationaryContext {
    static CTX: OnceLock<StationaryContext> = OnceLock::new();
    CTX.get_or_init(|| StationaryContext::new(Problem::new(16, 10.0).unwrap(), 400).unwrap())
}

fn u1() -> &'static StationaryField {
    static U1: OnceLock<StationaryField> = OnceLock::new();
    U1.get_or_init(|| solve_u1(context(), &StationaryOptions::default()).unwrap())
}

#[test]
fn singular_solution_is_homogeneous() {
    let ctx = context();
    let p = &ctx.problem;
    for theta in [0.0, 0.7, FRAC_PI_2] {
        let a = u_infinity(p, &ctx.profile, 1.0, theta).unwrap();
        let b = u_infinity(p, &ctx.profile, 3.0, theta).unwrap();
        assert_relative_eq!(b / a, 3f64.powf(-p.m), max_relative = 1e-14);
    }
    assert!(u_infinity(p, &ctx.profile, 0.0, 0.0).is_err());
}

#[test]
fn regular_solution_is_ordered_below_singular() {
    let u = u1();
    assert_relative_eq!(u.origin_value(), 1.0, max_relative = 1e-12);
    assert!(u.ordering_margin() > -1e-8);
    assert!(u.residual < 1e-9);
    for r in [0.01, 0.3, 2.0, 40.0, 500.0] {
        for theta in [0.0, 1.0, FRAC_PI_2] {
            let v = u.eval(r, theta).unwrap();
            assert!(v > 0.0 && v <= context().u_inf(r, theta) + 1e-8);
        }
    }
}

#[test]
fn far_field_slope_is_gamma() {
    let u = u1();
    let gamma = context().gamma();
    assert!((u.fit.slope + gamma).abs() < 0.02 * gamma, "slope {}", u.fit.slope);
    assert!(u.fit.k1 > 0.0);
}

#[test]
fn evaluation_is_continuous_at_the_core_edge() {
    let u = u1();
    for c in [0.5 * u.core, 0.75 * u.core, u.core] {
        for theta in [0.0, 0.8, FRAC_PI_2] {
            let (a, b) = (u.eval(c * (1.0 - 1e-9), theta).unwrap(), u.eval(c * (1.0 + 1e-9), theta).unwrap());
            assert!((a - b).abs() < 1e-6, "{theta}: {a} {b} at {c}");
        }
    }
}

#[test]
fn scaling_law_for_u_alpha() {
    let u = u1();
    let q = context().problem.q;
    for alpha in [0.5, 2.0] {
        assert_relative_eq!(u_alpha(u, alpha, 0.0, 0.0).unwrap(), alpha, max_relative = 1e-12);
        let r = 0.4;
        let direct = alpha * u.eval(alpha.powf(q - 1.0) * r, 0.3).unwrap();
        assert_relative_eq!(u_alpha(u, alpha, r, 0.3).unwrap(), direct, max_relative = 1e-14);
    }
    assert!(u_alpha(u, -1.0, 0.0, 0.0).is_err());
}

#[test]
fn independent_alpha_solve_follows_the_k_law() {
    let ctx = context();
    let opts = StationaryOptions::default();
    let (_, k1) = solve_u_alpha_extrapolated(ctx, 1.0, &opts).unwrap();
    let (u2, k2) = solve_u_alpha_extrapolated(ctx, 2.0, &opts).unwrap();
    let law = k_alpha_law(k1.value, 2.0, &ctx.problem, ctx.mu1);
    assert!((k2.value - law).abs() < 0.02 * law, "{} vs {law}", k2.value);
    // larger alpha lies above
    for r in [0.05, 0.5, 5.0] {
        assert!(u2.eval(r, 0.4).unwrap() >= u1().eval(r, 0.4).unwrap());
    }
}

#[test]
fn calibration_inverts_the_law() {
    let ctx = context();
    let (k1, c) = (0.007, 0.0178);
    let alpha = calibrate_alpha(k1, c, &ctx.problem, ctx.mu1).unwrap();
    assert_relative_eq!(k_alpha_law(k1, alpha, &ctx.problem, ctx.mu1), c, max_relative = 1e-12);
    assert!(calibrate_alpha(-1.0, c, &ctx.problem, ctx.mu1).is_err());
}
